use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args};
use ndarray::Axis;
use serde::{Deserialize, Serialize};

use nap::augment::AugmentConfig;
use nap::autodiff::AdamConfig;
use nap::data::{generate as generate_graph, load_graph, save_graph, SyntheticConfig};
use nap::graph::Graph;
use nap::metrics::{
    cdp_similarity_report, export_embeddings, pdd as pdd_report, read_embeddings,
    CdpSimilarityReport, ProbeConfig,
};
use nap::objective::{LossConfig, SimilarityMask};
use nap::train::{
    resume, run_ablation_cdp_removal, train_with, Checkpoint, MaskRefresh, MetricsRecord,
    SplitConfig, TrainConfig, TrainObserver, TrainOutcome, TrainSetup, METRICS_HEADER,
};

use crate::config::overlay;
use crate::CliError;

fn synth() -> SyntheticConfig {
    SyntheticConfig::default()
}

fn tc() -> TrainConfig {
    TrainConfig::default()
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Number of domains.
    #[arg(long, default_value_t = synth().num_domains)]
    pub num_domains: usize,
    /// Number of classes shared by all domains.
    #[arg(long, default_value_t = synth().num_classes)]
    pub num_classes: usize,
    #[arg(long, default_value_t = synth().nodes_per_domain)]
    pub nodes_per_domain: usize,
    #[arg(long, default_value_t = synth().num_features)]
    pub num_features: usize,
    /// Edge probability between same-class nodes of a domain.
    #[arg(long, default_value_t = synth().intra_class_edge_prob)]
    pub intra_class_edge_prob: f64,
    /// Edge probability between different-class nodes of a domain.
    #[arg(long, default_value_t = synth().inter_class_edge_prob)]
    pub inter_class_edge_prob: f64,
    /// Norm of the class mean offsets.
    #[arg(long, default_value_t = synth().class_signal_strength)]
    pub class_signal_strength: f64,
    /// Norm of the per-domain feature shift.
    #[arg(long, default_value_t = synth().domain_shift_strength)]
    pub domain_shift_strength: f64,
    #[arg(long, default_value_t = synth().noise_std)]
    pub noise_std: f64,
    #[arg(long, default_value_t = synth().seed)]
    pub seed: u64,
}

impl GeneratorParams {
    fn to_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_domains: self.num_domains,
            num_classes: self.num_classes,
            nodes_per_domain: self.nodes_per_domain,
            num_features: self.num_features,
            intra_class_edge_prob: self.intra_class_edge_prob,
            inter_class_edge_prob: self.inter_class_edge_prob,
            class_signal_strength: self.class_signal_strength,
            domain_shift_strength: self.domain_shift_strength,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output graph file.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with parameter values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub params: GeneratorParams,
}

impl GenerateArgs {
    pub fn resolve(mut self, matches: &ArgMatches) -> Result<Self, CliError> {
        if let Some(path) = &self.config {
            self.params = overlay(matches, &self.params, path)?;
        }
        Ok(self)
    }
}

pub fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let g = generate_graph(&args.params.to_config())?;
    save_graph(&g, &args.out)?;
    eprintln!(
        "wrote {} nodes, {} edges, {} domains to {}",
        g.num_nodes(),
        g.edges().len(),
        g.num_domains(),
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainParams {
    /// Softmax temperature.
    #[arg(long, default_value_t = tc().loss.tau)]
    pub tau: f64,
    /// Fraction of cross-domain pairs promoted to positives.
    #[arg(long, default_value_t = tc().loss.nap_ratio)]
    pub nap_ratio: f64,
    /// Epochs of plain contrastive training before promotion starts.
    #[arg(long, default_value_t = tc().loss.warmup_epochs)]
    pub warmup_epochs: usize,
    /// Probability of removing each cross-domain negative.
    #[arg(long, default_value_t = tc().loss.cdp_removal_ratio)]
    pub cdp_removal_ratio: f64,
    #[arg(long, default_value_t = tc().augment_alpha.drop_edge_prob)]
    pub drop_edge_alpha: f64,
    #[arg(long, default_value_t = tc().augment_alpha.mask_feature_prob)]
    pub mask_feature_alpha: f64,
    #[arg(long, default_value_t = tc().augment_beta.drop_edge_prob)]
    pub drop_edge_beta: f64,
    #[arg(long, default_value_t = tc().augment_beta.mask_feature_prob)]
    pub mask_feature_beta: f64,
    /// Number of GCN layers.
    #[arg(long, default_value_t = tc().num_layers)]
    pub num_layers: usize,
    #[arg(long, default_value_t = tc().hidden_dim)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = tc().embedding_dim)]
    pub embedding_dim: usize,
    /// Compare embeddings through a two-layer projection head.
    #[arg(long, action = clap::ArgAction::Set, default_value_t = tc().projection_head)]
    pub projection_head: bool,
    /// Adam learning rate.
    #[arg(long, default_value_t = tc().optimizer.lr)]
    pub lr: f64,
    #[arg(long, default_value_t = tc().optimizer.beta1)]
    pub beta1: f64,
    #[arg(long, default_value_t = tc().optimizer.beta2)]
    pub beta2: f64,
    #[arg(long, default_value_t = tc().optimizer.eps)]
    pub adam_eps: f64,
    /// Total training epochs, warm-up included.
    #[arg(long, default_value_t = tc().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = tc().seed)]
    pub seed: u64,
    /// Number of source (training) domains.
    #[arg(long, default_value_t = tc().split.n_source)]
    pub n_source: usize,
    /// Number of validation domains used for checkpoint selection.
    #[arg(long, default_value_t = tc().split.n_val)]
    pub n_val: usize,
    #[arg(long, default_value_t = tc().split.n_target)]
    pub n_target: usize,
    /// Seed of the domain role assignment.
    #[arg(long, default_value_t = tc().split.seed)]
    pub split_seed: u64,
    /// Epochs between evaluations.
    #[arg(long, default_value_t = tc().eval_every)]
    pub eval_every: usize,
    /// When to recompute promoted pairs: every-epoch or once.
    #[arg(long, default_value_t = tc().mask_refresh)]
    pub mask_refresh: MaskRefresh,
    /// Gradient steps of the linear probe.
    #[arg(long, default_value_t = tc().probe.steps)]
    pub probe_steps: usize,
    #[arg(long, default_value_t = tc().probe.lr)]
    pub probe_lr: f64,
    #[arg(long, default_value_t = tc().probe.weight_decay)]
    pub probe_weight_decay: f64,
    #[arg(long, default_value_t = tc().probe.seed)]
    pub probe_seed: u64,
    /// Largest accepted number of training nodes.
    #[arg(long, default_value_t = tc().max_nodes)]
    pub max_nodes: usize,
}

impl TrainParams {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            loss: LossConfig {
                tau: self.tau,
                nap_ratio: self.nap_ratio,
                warmup_epochs: self.warmup_epochs,
                cdp_removal_ratio: self.cdp_removal_ratio,
            },
            augment_alpha: AugmentConfig {
                drop_edge_prob: self.drop_edge_alpha,
                mask_feature_prob: self.mask_feature_alpha,
            },
            augment_beta: AugmentConfig {
                drop_edge_prob: self.drop_edge_beta,
                mask_feature_prob: self.mask_feature_beta,
            },
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            embedding_dim: self.embedding_dim,
            projection_head: self.projection_head,
            optimizer: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            epochs: self.epochs,
            seed: self.seed,
            split: SplitConfig {
                n_source: self.n_source,
                n_val: self.n_val,
                n_target: self.n_target,
                seed: self.split_seed,
            },
            eval_every: self.eval_every,
            mask_refresh: self.mask_refresh,
            probe: ProbeConfig {
                steps: self.probe_steps,
                lr: self.probe_lr,
                weight_decay: self.probe_weight_decay,
                seed: self.probe_seed,
            },
            max_nodes: self.max_nodes,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainRunParams {
    /// Comma-separated training seeds; one subdirectory per seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainParams,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Input graph file.
    #[arg(long)]
    pub graph: PathBuf,
    /// Directory for metrics and checkpoints.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML file with parameter values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint with its stored configuration.
    #[arg(long, conflicts_with = "seeds")]
    pub resume: Option<PathBuf>,
    /// Write every promoted pair set as epoch,i,j,similarity rows.
    #[arg(long)]
    pub mask_dump: Option<PathBuf>,
    #[command(flatten)]
    pub params: TrainRunParams,
}

impl TrainArgs {
    pub fn resolve(mut self, matches: &ArgMatches) -> Result<Self, CliError> {
        if let Some(path) = &self.config {
            self.params = overlay(matches, &self.params, path)?;
        }
        Ok(self)
    }
}

fn load(path: &Path) -> Result<Graph, CliError> {
    load_graph(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<File, CliError> {
    File::create(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Streams metrics rows, the latest checkpoint and promoted pairs to disk.
struct RunFiles {
    metrics: File,
    last_path: PathBuf,
    mask_dump: Option<BufWriter<File>>,
}

impl RunFiles {
    fn open(dir: &Path, mask_dump: Option<&Path>, append: bool) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        let path = dir.join("metrics.csv");
        let metrics = if append && path.exists() {
            OpenOptions::new().append(true).open(&path)?
        } else {
            let mut f = create(&path)?;
            writeln!(f, "{METRICS_HEADER}")?;
            f
        };
        let mask_dump = match mask_dump {
            Some(p) => {
                let mut w = BufWriter::new(create(p)?);
                writeln!(w, "epoch,i,j,similarity")?;
                Some(w)
            }
            None => None,
        };
        Ok(Self {
            metrics,
            last_path: dir.join("last.json"),
            mask_dump,
        })
    }
}

impl TrainObserver for RunFiles {
    fn on_record(&mut self, record: &MetricsRecord, snapshot: &Checkpoint) -> io::Result<()> {
        writeln!(self.metrics, "{}", record.csv_row())?;
        self.metrics.flush()?;
        snapshot.save(&self.last_path).map_err(io::Error::other)?;
        eprintln!(
            "epoch {:>4} {:<6} loss {:.5} pdd {:.4} val {:.4}",
            record.epoch, record.stage, record.loss, record.pdd, record.val_acc
        );
        Ok(())
    }

    fn on_mask(&mut self, mask: &SimilarityMask, node_ids: &[usize]) -> io::Result<()> {
        if let Some(w) = &mut self.mask_dump {
            for (&(i, j), s) in mask.pairs.iter().zip(&mask.similarities) {
                writeln!(w, "{},{},{},{}", mask.epoch, node_ids[i], node_ids[j], s)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

struct RunSummary {
    seed: u64,
    best_epoch: Option<usize>,
    best_val_acc: Option<f64>,
    best_target_acc: Option<f64>,
    final_pdd: Option<f64>,
}

fn finish(
    dir: &Path,
    seed: u64,
    outcome: &TrainOutcome,
    resumed: bool,
) -> Result<RunSummary, CliError> {
    let save = |ckpt: &Checkpoint, name: &str| {
        ckpt.save(&dir.join(name))
            .map_err(|e| CliError::Runtime(e.to_string()))
    };
    let best_path = dir.join("best.json");
    let previous = if resumed && best_path.exists() {
        Some(load_checkpoint(&best_path)?)
    } else {
        None
    };
    let improved = match &previous {
        None => true,
        Some(p) => !outcome.records.is_empty() && outcome.best.val_acc > p.val_acc,
    };
    if improved {
        save(&outcome.best, "best.json")?;
    }
    save(&outcome.last, "last.json")?;
    let best_ckpt = if improved {
        &outcome.best
    } else {
        previous.as_ref().unwrap()
    };
    let best_epoch = best_ckpt.epochs_completed.checked_sub(1);
    let best = outcome.records.iter().find(|r| Some(r.epoch) == best_epoch);
    Ok(RunSummary {
        seed,
        best_epoch: best.map(|r| r.epoch),
        best_val_acc: best.map(|r| r.val_acc),
        best_target_acc: best.and_then(|r| r.target_acc),
        final_pdd: outcome.records.last().map(|r| r.pdd),
    })
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summary_csv(runs: &[RunSummary]) -> String {
    let mut out = String::from("seed,best_epoch,best_val_acc,best_target_acc,final_pdd\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.seed,
            opt(r.best_epoch),
            opt(r.best_val_acc),
            opt(r.best_target_acc),
            opt(r.final_pdd)
        ));
    }
    out.push_str(&format!(
        "mean,,{},{},{}\n",
        opt(mean(runs.iter().map(|r| r.best_val_acc))),
        opt(mean(runs.iter().map(|r| r.best_target_acc))),
        opt(mean(runs.iter().map(|r| r.final_pdd)))
    ));
    out
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let graph = load(&args.graph)?;

    if let Some(path) = &args.resume {
        let ckpt = load_checkpoint(path)?;
        let seed = ckpt.config.seed;
        let mut files = RunFiles::open(&args.out_dir, args.mask_dump.as_deref(), true)?;
        let outcome = resume(&graph, ckpt, &mut files)?;
        let summary = finish(&args.out_dir, seed, &outcome, true)?;
        print!("{}", summary_csv(&[summary]));
        return Ok(());
    }

    let base = args.params.train.to_config();
    base.validate()?;
    let runs: Vec<(u64, PathBuf)> = match &args.params.seeds {
        None => vec![(base.seed, args.out_dir.clone())],
        Some(seeds) if seeds.is_empty() => {
            return Err(CliError::Usage("--seeds needs at least one value".into()))
        }
        Some(seeds) => seeds
            .iter()
            .map(|&s| (s, args.out_dir.join(format!("seed-{s}"))))
            .collect(),
    };
    let multi = args.params.seeds.is_some();

    let mut summaries = Vec::new();
    for (seed, dir) in runs {
        let cfg = TrainConfig {
            seed,
            ..base.clone()
        };
        let dump = args
            .mask_dump
            .as_ref()
            .map(|p| match (multi, p.file_name()) {
                (true, Some(name)) => dir.join(name),
                _ => p.clone(),
            });
        let mut files = RunFiles::open(&dir, dump.as_deref(), false)?;
        let outcome = train_with(&graph, &cfg, &mut files)?;
        summaries.push(finish(&dir, seed, &outcome, false)?);
    }
    let table = summary_csv(&summaries);
    if multi {
        fs::write(args.out_dir.join("summary.csv"), &table)?;
    }
    print!("{table}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Graph the checkpoint was trained on.
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write un-augmented embeddings of every node to this CSV file.
    #[arg(long)]
    pub export_embeddings: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let graph = load(&args.graph)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let setup = TrainSetup::with_split(&graph, &ckpt.config, ckpt.split.clone())?;
    let (_, val, target) = setup.evaluate(&ckpt.params, &ckpt.config.probe)?;
    println!("split,accuracy");
    println!("validation,{val}");
    if let Some(t) = target {
        println!("target,{t}");
    }
    if let Some(path) = &args.export_embeddings {
        let h = setup.embed_all(&ckpt.params)?;
        export_embeddings(&h, graph.domains(), graph.labels(), path)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PddArgs {
    /// Embedding export as written by `eval --export-embeddings`.
    #[arg(long)]
    pub embeddings: PathBuf,
}

pub fn pdd(args: PddArgs) -> Result<(), CliError> {
    let table = read_embeddings(&args.embeddings)?;
    let report = pdd_report(&table.embeddings, &table.domains)?;
    print!("{}", report.to_table());
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AblateParams {
    /// Comma-separated removal ratios.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0])]
    pub q: Vec<f64>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainParams,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// Directory for the per-run metrics and the summary table.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML file with parameter values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub params: AblateParams,
}

impl AblateArgs {
    pub fn resolve(mut self, matches: &ArgMatches) -> Result<Self, CliError> {
        if let Some(path) = &self.config {
            self.params = overlay(matches, &self.params, path)?;
        }
        Ok(self)
    }
}

pub fn ablate(args: AblateArgs) -> Result<(), CliError> {
    if let Some(q) = args.params.q.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(CliError::Usage(format!(
            "removal ratio {q} is outside [0, 1]"
        )));
    }
    let graph = load(&args.graph)?;
    let base = args.params.train.to_config();
    let table = run_ablation_cdp_removal(&graph, &base, &args.params.q, &args.params.seeds)?;

    let runs_dir = args.out_dir.join("runs");
    fs::create_dir_all(&runs_dir)?;
    for run in &table.runs {
        let mut w = BufWriter::new(create(
            &runs_dir.join(format!("q{}-seed{}.csv", run.q, run.seed)),
        )?);
        writeln!(w, "{METRICS_HEADER}")?;
        for r in &run.records {
            writeln!(w, "{}", r.csv_row())?;
        }
        w.flush()?;
    }
    let csv = table.to_csv();
    fs::write(args.out_dir.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// Checkpoint whose promoted pair set is reported, normally last.json.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

fn report_row(r: &CdpSimilarityReport) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.space,
        r.all_mean,
        r.all_count,
        opt(r.transformed_mean),
        r.transformed_count,
        opt(r.remaining_mean),
        r.remaining_count
    )
}

pub fn report_cdp_sim(args: ReportArgs) -> Result<(), CliError> {
    let graph = load(&args.graph)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let setup = TrainSetup::with_split(&graph, &ckpt.config, ckpt.split.clone())?;
    let mask = ckpt
        .mask
        .clone()
        .unwrap_or_else(|| SimilarityMask::empty(0));
    if mask.is_empty() {
        eprintln!("checkpoint has no promoted pairs");
    }
    let domains = setup.train_graph.domains();
    let features = cdp_similarity_report(setup.train_graph.features(), domains, &mask, "features")?;
    let h = setup
        .embed_all(&ckpt.params)?
        .select(Axis(0), &setup.train_node_ids);
    let embeddings = cdp_similarity_report(&h, domains, &mask, "embeddings")?;
    println!("space,all_mean,all_count,transformed_mean,transformed_count,remaining_mean,remaining_count");
    println!("{}", report_row(&features));
    println!("{}", report_row(&embeddings));
    Ok(())
}
