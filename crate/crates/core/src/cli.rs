//! Command-line front end. Every subcommand reads and writes artifacts under
//! one run directory:
//!
//! ```text
//! <out>/config.toml              resolved config (gen-data)
//! <out>/corpus/                  gen-data
//! <out>/stage1/encoder.ckpt      train-stage1 (+ coarse_proxies.bin, metrics.json)
//! <out>/stage2/partition.json    partition-layers
//! <out>/stage2/adaptor.ckpt      train-stage2 (+ ranker_v5.ckpt, fine_proxies.bin)
//! <out>/ranker/<variant>.ckpt    train-ranker
//! <out>/eval/<variant>/          eval (scores.jsonl, auc.json)
//! <out>/ablation/                ablation (report.json, report.md)
//! <out>/proxies/store.bin        gen-proxies
//! <out>/viz/projection.csv       viz
//! ```
//!
//! Each subcommand also writes a manifest (`manifest.json`, or
//! `<name>.manifest.json` where a directory is shared); manifests are the only
//! files that carry timestamps and runtimes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::align1::{mean_cosine, retrieval_eval, IdEmbeddingTable};
use crate::align2::{AdaptorParams, LayerPartition, N_GROUPS};
use crate::checkpoint;
use crate::config::{RunConfig, SEED_ENV};
use crate::datagen::{generate_corpus, load_corpus, save_corpus, Corpus};
use crate::diffcore::Parameters;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::evalkit::{kmeans_silhouette, project_2d, projection_csv, run_ablation_timed};
use crate::pipeline::{self, item_inputs, score_split, split_auc, split_by_name};
use crate::proxystore::{self, checksum, GenerationArtifacts, ProxyRecord, ProxyStore};
use crate::ranker::{train_ranker, ItemInputs, Ranker, RankerShape, Variant};
use crate::ProxyMap;

#[derive(Debug, Parser)]
#[command(name = "coldproxy", version, about = "Content proxies for cold-start CTR ranking")]
pub struct Cli {
    /// TOML run config; defaults to <out>/config.toml, then built-in desk settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config (also read from COLDPROXY_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VizSource {
    /// Preprocessed ID-embedding targets of warm items.
    Id,
    Coarse,
    Fine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ItemSelection {
    Cold,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train the encoder with the proxy alignment loss and emit coarse proxies.
    TrainStage1,
    /// Cluster encoder layers and pick one representative per group.
    PartitionLayers,
    /// Train the adaptor jointly with the full (v5) ranker and emit fine proxies.
    TrainStage2,
    /// Train one ranker variant.
    TrainRanker {
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
    },
    /// Score a trained variant; prints one `auc <split> <value>` line per split.
    Eval {
        #[arg(long, value_parser = parse_variant, default_value = "v5")]
        variant: Variant,
        #[arg(long = "split", default_values_t = ["cold".to_string(), "warm".to_string(), "global".to_string()])]
        splits: Vec<String>,
    },
    /// Train and evaluate every variant for several model seeds.
    Ablation {
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Compute and store proxies for items outside the training log.
    GenProxies {
        #[arg(long, value_enum, default_value = "cold")]
        items: ItemSelection,
    },
    /// Project embeddings to 2-D and report their 3-cluster silhouette.
    Viz {
        #[arg(long, value_enum, default_value = "id")]
        source: VizSource,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Help and version requests print and succeed.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return Err(Error::Input(format!("usage: {line}")));
        }
    };
    run(&cli)
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut ctx = Ctx::new(cli)?;
    let start = Instant::now();
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let (manifest_path, outputs, extra) = match &cli.command {
        Command::GenData => ctx.gen_data()?,
        Command::TrainStage1 => ctx.train_stage1()?,
        Command::PartitionLayers => ctx.partition_layers()?,
        Command::TrainStage2 => ctx.train_stage2()?,
        Command::TrainRanker { variant } => ctx.train_ranker(*variant)?,
        Command::Eval { variant, splits } => ctx.eval(*variant, splits)?,
        Command::Ablation { seeds } => ctx.ablation(*seeds)?,
        Command::GenProxies { items } => ctx.gen_proxies(*items)?,
        Command::Viz { source } => ctx.viz(*source)?,
    };
    let manifest = Manifest {
        command: command_name(&cli.command),
        config_hash: ctx.cfg.hash(),
        seed: ctx.cfg.seed,
        started_unix: started,
        runtime_secs: start.elapsed().as_secs_f64(),
        outputs: outputs
            .iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                Ok(OutputEntry {
                    path: p.strip_prefix(&ctx.out).unwrap_or(p).display().to_string(),
                    sha256: checksum(&bytes),
                })
            })
            .collect::<Result<_>>()?,
        extra,
    };
    write_json(&manifest_path, &manifest)
}

fn command_name(c: &Command) -> String {
    match c {
        Command::GenData => "gen-data".into(),
        Command::TrainStage1 => "train-stage1".into(),
        Command::PartitionLayers => "partition-layers".into(),
        Command::TrainStage2 => "train-stage2".into(),
        Command::TrainRanker { variant } => format!("train-ranker --variant {}", variant.short()),
        Command::Eval { variant, .. } => format!("eval --variant {}", variant.short()),
        Command::Ablation { seeds } => format!("ablation --seeds {seeds}"),
        Command::GenProxies { .. } => "gen-proxies".into(),
        Command::Viz { .. } => "viz".into(),
    }
}

#[derive(Serialize)]
struct OutputEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config_hash: String,
    seed: u64,
    started_unix: u64,
    runtime_secs: f64,
    outputs: Vec<OutputEntry>,
    extra: serde_json::Value,
}

/// Manifest path, output files, extra manifest fields.
type StepOutput = (PathBuf, Vec<PathBuf>, serde_json::Value);

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency {
            path: path.to_path_buf(),
            producer: producer.into(),
        })
    }
}

struct Ctx {
    out: PathBuf,
    cfg: RunConfig,
    /// Seed given on the command line or in the environment.
    explicit_seed: Option<u64>,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let saved = cli.out.join("config.toml");
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None if saved.exists() => RunConfig::load(&saved)?,
            None => RunConfig::desk(),
        };
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::config(SEED_ENV, format!("not an integer: `{s}`")))?,
            ),
            Err(_) => None,
        };
        let explicit_seed = cli.seed.or(env_seed);
        let seed = explicit_seed.unwrap_or(cfg.seed);
        cfg = cfg.with_seed(seed).harmonized();
        cfg.validate()?;
        Ok(Self {
            out: cli.out.clone(),
            cfg,
            explicit_seed,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn corpus(&mut self) -> Result<Corpus> {
        let corpus = load_corpus(&self.path("corpus"))?;
        // the corpus on disk decides the world; model seeds stay as resolved
        self.cfg.generation = corpus.config.clone();
        self.cfg = self.cfg.clone().harmonized();
        self.cfg.validate()?;
        Ok(corpus)
    }

    fn encoder(&self) -> Result<Encoder> {
        let path = self.path("stage1/encoder.ckpt");
        require(&path, "train-stage1")?;
        let mut enc = Encoder::new(self.cfg.encoder.clone(), self.cfg.stage1.seed)?;
        checkpoint::load_into(&mut enc.params, &path)?;
        Ok(enc)
    }

    fn partition(&self) -> Result<LayerPartition> {
        let path = self.path("stage2/partition.json");
        require(&path, "partition-layers")?;
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::format(&path, e.to_string()))
    }

    fn table(&self, corpus: &Corpus) -> Result<IdEmbeddingTable> {
        pipeline::id_table(corpus, &self.cfg)
    }

    /// Stage artifacts needed by `variant`, checked before any work starts.
    fn inputs(&self, corpus: &Corpus, table: &IdEmbeddingTable, variant: Variant) -> Result<(ItemInputs, Option<String>)> {
        let encoder = if variant.uses_coarse() { Some(self.encoder()?) } else { None };
        let partition = if variant.uses_fine() { Some(self.partition()?) } else { None };
        let inputs = item_inputs(corpus, table, &self.cfg, variant, encoder.as_ref(), partition.as_ref())?;
        Ok((inputs, encoder.map(|e| e.param_hash())))
    }

    fn gen_data(&self) -> Result<StepOutput> {
        let corpus = generate_corpus(&self.cfg.generation)?;
        let dir = self.path("corpus");
        save_corpus(&corpus, &dir)?;
        let cfg_path = self.path("config.toml");
        write_file(&cfg_path, self.cfg.to_toml_string()?.as_bytes())?;
        let n_cold = corpus.cold_items().count();
        println!(
            "corpus {}: {} users, {} items ({n_cold} cold), {} interactions",
            corpus.config_hash(),
            corpus.users.len(),
            corpus.items.len(),
            corpus.interactions.len()
        );
        let outputs = ["items.jsonl", "users.jsonl", "interactions.jsonl", "id_table.jsonl", "meta.json"]
            .iter()
            .map(|f| dir.join(f))
            .chain([cfg_path])
            .collect();
        Ok((dir.join("manifest.json"), outputs, json!({ "corpus_hash": corpus.config_hash() })))
    }

    fn train_stage1(&mut self) -> Result<StepOutput> {
        let corpus = self.corpus()?;
        let table = self.table(&corpus)?;
        let out = crate::align1::train_stage1(&corpus, &table, &self.cfg.encoder, &self.cfg.stage1)?;
        let dir = self.path("stage1");
        let ckpt = dir.join("encoder.ckpt");
        let hash = out.encoder.param_hash();
        checkpoint::save(
            &out.encoder.params,
            &self.cfg.hash(),
            json!({ "corpus_hash": corpus.config_hash(), "seed": self.cfg.stage1.seed }),
            &ckpt,
        )?;
        let store = dir.join("coarse_proxies.bin");
        let records: Vec<ProxyRecord> = out
            .proxies
            .iter()
            .map(|(&id, p)| ProxyRecord {
                item_id: id,
                p_coarse: p.iter().map(|&x| x as f32).collect(),
                p_fine: None,
                version: 1,
                stage1_hash: hash.clone(),
                stage2_hash: String::new(),
            })
            .collect();
        replace_store(&store, &records)?;
        let metrics = json!({
            "top1": retrieval_eval(&out.proxies, &table, 1)?,
            "top5": retrieval_eval(&out.proxies, &table, 5)?,
            "mean_cosine": mean_cosine(&out.proxies, &table)?,
            "epoch_losses": out.epoch_losses,
            "encoder_hash": hash,
        });
        let metrics_path = dir.join("metrics.json");
        write_json(&metrics_path, &metrics)?;
        println!(
            "stage1 top1 {:.4} mean_cosine {:.4}",
            metrics["top1"].as_f64().unwrap_or(f64::NAN),
            metrics["mean_cosine"].as_f64().unwrap_or(f64::NAN)
        );
        Ok((dir.join("manifest.json"), vec![ckpt, store, metrics_path], json!({})))
    }

    fn partition_layers(&mut self) -> Result<StepOutput> {
        let corpus = self.corpus()?;
        let encoder = self.encoder()?;
        let part = pipeline::stage2_partition(&encoder, &corpus, &self.cfg)?;
        let dir = self.path("stage2");
        let path = dir.join("partition.json");
        write_json(&path, &part)?;
        println!("layers {:?}", part.layers);
        Ok((dir.join("partition.manifest.json"), vec![path], json!({ "encoder_hash": encoder.param_hash() })))
    }

    fn train_variant(&self, corpus: &Corpus, variant: Variant) -> Result<(crate::ranker::TrainedRanker, ItemInputs, Option<String>)> {
        let table = self.table(corpus)?;
        let (inputs, enc_hash) = self.inputs(corpus, &table, variant)?;
        let splits = crate::datagen::split_train_eval(corpus)?;
        let mut rcfg = self.cfg.ranker.clone();
        rcfg.variant = variant;
        let trained = train_ranker(corpus, &splits.train, &inputs, &rcfg, self.cfg.stage2.adaptor_hidden)?;
        Ok((trained, inputs, enc_hash))
    }

    fn save_ranker(&self, ranker: &Ranker, enc_hash: &Option<String>, losses: &[f64], path: &Path) -> Result<()> {
        checkpoint::save(
            &ranker.params,
            &self.cfg.hash(),
            json!({
                "variant": ranker.config.variant.short(),
                "stage1_hash": enc_hash,
                "epoch_losses": losses,
            }),
            path,
        )
    }

    fn train_stage2(&mut self) -> Result<StepOutput> {
        let corpus = self.corpus()?;
        let (trained, inputs, enc_hash) = self.train_variant(&corpus, Variant::V5StructureReuse)?;
        let enc_hash = enc_hash.expect("v5 loads the encoder");
        let dir = self.path("stage2");
        let ranker_path = dir.join("ranker_v5.ckpt");
        self.save_ranker(&trained.ranker, &Some(enc_hash.clone()), &trained.epoch_losses, &ranker_path)?;
        let adaptor = trained.ranker.params.adaptor.as_ref().expect("v5 has an adaptor");
        let adaptor_path = dir.join("adaptor.ckpt");
        let part = self.partition()?;
        checkpoint::save(
            adaptor,
            &self.cfg.hash(),
            json!({ "stage1_hash": enc_hash, "layers": part.layers }),
            &adaptor_path,
        )?;
        let fine = trained.ranker.fine_proxies(&inputs)?.expect("v5 emits fine proxies");
        let coarse = inputs.coarse.as_ref().expect("v5 uses coarse");
        let stage2_hash = adaptor.content_hash();
        let records: Vec<ProxyRecord> = fine
            .iter()
            .map(|(&id, f)| ProxyRecord {
                item_id: id,
                p_coarse: coarse.row(id as usize).iter().map(|&x| x as f32).collect(),
                p_fine: Some(f.iter().map(|&x| x as f32).collect()),
                version: 1,
                stage1_hash: enc_hash.clone(),
                stage2_hash: stage2_hash.clone(),
            })
            .collect();
        let store = dir.join("fine_proxies.bin");
        replace_store(&store, &records)?;
        println!(
            "stage2 final loss {:.5}, adaptor params {}, ranker params {}",
            trained.epoch_losses.last().copied().unwrap_or(f64::NAN),
            adaptor.num_parameters(),
            trained.ranker.params.ranker_param_count()
        );
        Ok((
            dir.join("manifest.json"),
            vec![ranker_path, adaptor_path, store],
            json!({ "epoch_losses": trained.epoch_losses }),
        ))
    }

    fn train_ranker(&mut self, variant: Variant) -> Result<StepOutput> {
        let corpus = self.corpus()?;
        let (trained, _, enc_hash) = self.train_variant(&corpus, variant)?;
        let dir = self.path("ranker");
        let path = dir.join(format!("{}.ckpt", variant.short()));
        self.save_ranker(&trained.ranker, &enc_hash, &trained.epoch_losses, &path)?;
        println!(
            "{variant} final loss {:.5}",
            trained.epoch_losses.last().copied().unwrap_or(f64::NAN)
        );
        Ok((
            dir.join(format!("{}.manifest.json", variant.short())),
            vec![path],
            json!({ "epoch_losses": trained.epoch_losses }),
        ))
    }

    fn eval(&mut self, variant: Variant, splits: &[String]) -> Result<StepOutput> {
        let corpus = self.corpus()?;
        let mut path = self.path(&format!("ranker/{}.ckpt", variant.short()));
        if !path.exists() && variant == Variant::V5StructureReuse {
            path = self.path("stage2/ranker_v5.ckpt");
        }
        require(&path, &format!("train-ranker --variant {}", variant.short()))?;
        let all = crate::datagen::split_train_eval(&corpus)?;
        let sets = splits
            .iter()
            .map(|s| Ok((s.as_str(), split_by_name(&all, s)?)))
            .collect::<Result<Vec<_>>>()?;
        let table = self.table(&corpus)?;
        let (inputs, enc_hash) = self.inputs(&corpus, &table, variant)?;
        let header = checkpoint::read_header(&path)?;
        let stored = header.meta.get("stage1_hash").and_then(|v| v.as_str()).map(str::to_string);
        if variant.uses_coarse() && stored != enc_hash {
            return Err(Error::HashMismatch(format!(
                "{} was trained against a different Stage-1 encoder",
                path.display()
            )));
        }
        let mut rcfg = self.cfg.ranker.clone();
        rcfg.variant = variant;
        let shape = RankerShape::of(&corpus, &inputs, self.cfg.stage2.adaptor_hidden);
        let mut ranker = Ranker::new(rcfg, shape)?;
        checkpoint::load_into(&mut ranker.params, &path)?;
        let dir = self.path(&format!("eval/{}", variant.short()));
        let mut lines = String::new();
        let mut aucs = serde_json::Map::new();
        for (name, set) in &sets {
            let rows = score_split(&ranker, &inputs, &corpus, set, name)?;
            let a = split_auc(&rows)?;
            println!("auc {name} {a:.6}");
            aucs.insert(name.to_string(), json!(a));
            for r in &rows {
                lines.push_str(&serde_json::to_string(r)?);
                lines.push('\n');
            }
        }
        let scores = dir.join("scores.jsonl");
        write_file(&scores, lines.as_bytes())?;
        let auc_path = dir.join("auc.json");
        write_json(&auc_path, &aucs)?;
        Ok((dir.join("manifest.json"), vec![scores, auc_path], json!({})))
    }

    fn ablation(&mut self, n_seeds: usize) -> Result<StepOutput> {
        if n_seeds == 0 {
            return Err(Error::config("seeds", "must be >= 1"));
        }
        let corpus = self.corpus()?;
        let first = self.explicit_seed.unwrap_or(self.cfg.eval.first_seed);
        let seeds: Vec<u64> = (first..first + n_seeds as u64).collect();
        let mut cfg = self.cfg.clone();
        cfg.eval.n_seeds = n_seeds;
        cfg.eval.first_seed = first;
        let (report, timings) = run_ablation_timed(&corpus, &cfg, &seeds)?;
        let dir = self.path("ablation");
        let json_path = dir.join("report.json");
        write_file(&json_path, (report.to_json()? + "\n").as_bytes())?;
        let md_path = dir.join("report.md");
        let md = report.to_markdown();
        write_file(&md_path, md.as_bytes())?;
        print!("{md}");
        Ok((dir.join("manifest.json"), vec![json_path, md_path], json!({ "seeds": seeds, "timings": timings })))
    }

    fn gen_proxies(&mut self, which: ItemSelection) -> Result<StepOutput> {
        let corpus = self.corpus()?;
        let encoder = self.encoder()?;
        let partition = self.partition()?;
        let apath = self.path("stage2/adaptor.ckpt");
        require(&apath, "train-stage2")?;
        let d = self.cfg.ranker.d;
        let mut adaptor = AdaptorParams::init(
            N_GROUPS * self.cfg.encoder.d_hidden,
            self.cfg.stage2.adaptor_hidden,
            d,
            d,
            self.cfg.ranker.seed,
        );
        let header = checkpoint::load_into(&mut adaptor, &apath)?;
        let expected = header
            .meta
            .get("stage1_hash")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::format(&apath, "missing stage1_hash"))?
            .to_string();
        let stored_layers: Vec<usize> = serde_json::from_value(header.meta["layers"].clone())
            .map_err(|e| Error::format(&apath, e.to_string()))?;
        if stored_layers != partition.layers {
            return Err(Error::HashMismatch(format!(
                "adaptor trained on layers {stored_layers:?}, partition.json has {:?}",
                partition.layers
            )));
        }
        let items: Vec<_> = match which {
            ItemSelection::Cold => corpus.cold_items().cloned().collect(),
            ItemSelection::All => corpus.items.clone(),
        };
        let arts = GenerationArtifacts {
            encoder: &encoder,
            partition: &partition,
            adaptor: &adaptor,
            expected_stage1_hash: expected,
            stage2_hash: adaptor.content_hash(),
        };
        let start = Instant::now();
        let fresh = proxystore::batch_generate(&items, &arts, 1)?;
        let secs = start.elapsed().as_secs_f64();
        let dir = self.path("proxies");
        let path = dir.join("store.bin");
        let (written, manifest) = append_changed(&path, fresh)?;
        println!(
            "proxies: {written} new records, {} stored items, {:.0} items/s",
            ProxyStore::open(&path)?.len(),
            items.len() as f64 / secs.max(1e-9)
        );
        Ok((
            dir.join("manifest.json"),
            vec![path],
            json!({ "written": written, "items_per_sec": items.len() as f64 / secs.max(1e-9), "store": manifest }),
        ))
    }

    fn viz(&mut self, source: VizSource) -> Result<StepOutput> {
        let corpus = self.corpus()?;
        let vectors: ProxyMap = match source {
            VizSource::Id => self.table(&corpus)?.targets,
            VizSource::Coarse => crate::align1::coarse_proxies(&self.encoder()?, &corpus)?,
            VizSource::Fine => {
                let path = self.path("stage2/fine_proxies.bin");
                require(&path, "train-stage2")?;
                let store = ProxyStore::open(&path)?;
                store
                    .ids()
                    .into_iter()
                    .map(|id| {
                        let r = store.lookup(id)?;
                        let f = r.p_fine.as_ref().ok_or_else(|| Error::NotFound(format!("fine proxy of {id}")))?;
                        Ok((id, f.iter().map(|&x| x as f64).collect()))
                    })
                    .collect::<Result<_>>()?
            }
        };
        let topics = corpus.items.iter().map(|i| (i.item_id, i.topic_id)).collect();
        let points = project_2d(&vectors, &topics)?;
        let coords: Vec<Vec<f64>> = points.iter().map(|p| vec![p.x, p.y]).collect();
        let sil = kmeans_silhouette(&coords, 3, self.cfg.seed)?;
        let dir = self.path("viz");
        let path = dir.join("projection.csv");
        write_file(&path, projection_csv(&points).as_bytes())?;
        println!("silhouette {sil:.4}");
        Ok((dir.join("manifest.json"), vec![path], json!({ "silhouette": sil })))
    }
}

/// Writes `records` as a fresh store, replacing any previous file.
fn replace_store(path: &Path, records: &[ProxyRecord]) -> Result<()> {
    if path.exists() {
        fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    proxystore::write_proxies(records, path)?;
    Ok(())
}

/// Appends only records that differ from the latest stored version of their
/// item, bumping the version. Re-running with unchanged artifacts is a no-op.
fn append_changed(path: &Path, fresh: Vec<ProxyRecord>) -> Result<(usize, Option<proxystore::StoreManifest>)> {
    let store = if path.exists() { Some(ProxyStore::open(path)?) } else { None };
    let mut changed = Vec::new();
    for mut r in fresh {
        match store.as_ref().and_then(|s| s.lookup(r.item_id).ok()) {
            Some(old)
                if old.p_coarse == r.p_coarse
                    && old.p_fine == r.p_fine
                    && old.stage1_hash == r.stage1_hash
                    && old.stage2_hash == r.stage2_hash => {}
            Some(old) => {
                r.version = old.version + 1;
                changed.push(r);
            }
            None => changed.push(r),
        }
    }
    if changed.is_empty() {
        return Ok((0, None));
    }
    let m = proxystore::write_proxies(&changed, path)?;
    Ok((changed.len(), Some(m)))
}
