//! Two-stage training, checkpoints and the pair-removal ablation.
//!
//! Epochs `0..n` optimize plain InfoNCE on fresh augmented views. From
//! epoch `n` on, each step first selects the top-r cross-domain pairs of
//! the current between-view similarity and optimizes the promoted loss.
//! Every `eval_every` epochs (and at the end of warm-up and of training)
//! the un-augmented graph is embedded, source-domain discrepancy is
//! measured, and a linear probe fit on source nodes is scored on the
//! validation and target domains. The checkpoint with the best validation
//! accuracy wins; ties keep the earliest.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{make_views, AugmentConfig, AugmentError};
use crate::autodiff::{
    gcn_forward, optimizer_step, project, AdamConfig, AutodiffError, EncoderParams, Matrix,
    OptimizerState, Tape,
};
use crate::data::{make_split, DataError, DomainSplit};
use crate::graph::{Graph, NormalizedAdjacency, ValidationErrors};
use crate::metrics::{pdd, LinearProbe, MetricsError, ProbeConfig};
use crate::objective::{
    cdp_removal_loss, contrastive_loss, cosine_similarity_matrix, cross_domain_count,
    promoted_count, select_top_r, zero_same_domain, LossConfig, ObjectiveError, SimilarityMask,
};
use crate::rng::derive_seed;

pub const CHECKPOINT_FORMAT: &str = "nap-checkpoint/1";
pub const METRICS_HEADER: &str = "epoch,stage,loss,pdd,val_acc,target_acc,mask_size";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}: {source}")]
    NonFiniteLoss {
        epoch: usize,
        #[source]
        source: AutodiffError,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] ValidationErrors),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<AugmentError> for TrainError {
    fn from(e: AugmentError) -> Self {
        TrainError::Config(e.to_string())
    }
}

impl From<ObjectiveError> for TrainError {
    fn from(e: ObjectiveError) -> Self {
        TrainError::Config(e.to_string())
    }
}

/// When the promoted pair set is recomputed during the promotion stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskRefresh {
    EveryEpoch,
    Once,
}

impl std::str::FromStr for MaskRefresh {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "every-epoch" => Ok(Self::EveryEpoch),
            "once" => Ok(Self::Once),
            other => Err(format!("unknown mask refresh policy {other:?} (every-epoch|once)")),
        }
    }
}

impl fmt::Display for MaskRefresh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EveryEpoch => "every-epoch",
            Self::Once => "once",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub n_source: usize,
    pub n_val: usize,
    pub n_target: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_source: 4,
            n_val: 1,
            n_target: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub augment_alpha: AugmentConfig,
    pub augment_beta: AugmentConfig,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub projection_head: bool,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub seed: u64,
    pub split: SplitConfig,
    pub eval_every: usize,
    pub mask_refresh: MaskRefresh,
    pub probe: ProbeConfig,
    /// Upper bound on training nodes; similarity matrices are dense.
    pub max_nodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            augment_alpha: AugmentConfig::default_alpha(),
            augment_beta: AugmentConfig::default_beta(),
            num_layers: 2,
            hidden_dim: 64,
            embedding_dim: 32,
            projection_head: false,
            optimizer: AdamConfig::default(),
            epochs: 200,
            seed: 0,
            split: SplitConfig::default(),
            eval_every: 10,
            mask_refresh: MaskRefresh::EveryEpoch,
            probe: ProbeConfig::default(),
            max_nodes: 5000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate()?;
        self.augment_alpha.validate()?;
        self.augment_beta.validate()?;
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.loss.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.loss.warmup_epochs, self.epochs
            ));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if self.num_layers == 0 || self.hidden_dim == 0 || self.embedding_dim == 0 {
            return bad("encoder layers and widths must be at least 1".into());
        }
        if !(self.optimizer.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.optimizer.lr));
        }
        Ok(())
    }

    /// Layer widths `[F, hidden, .., embedding]`.
    pub fn widths(&self, num_features: usize) -> Vec<usize> {
        let mut w = vec![num_features];
        w.extend(std::iter::repeat_n(self.hidden_dim, self.num_layers - 1));
        w.push(self.embedding_dim);
        w
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn is_eval_epoch(&self, epoch: usize) -> bool {
        (epoch + 1) % self.eval_every == 0
            || epoch + 1 == self.epochs
            || epoch + 1 == self.loss.warmup_epochs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Nap,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Warmup => "warmup",
            Stage::Nap => "nap",
        })
    }
}

/// One evaluation point. `epoch` is the 0-based index of the epoch that
/// has just been trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub loss: f64,
    pub pdd: f64,
    pub val_acc: f64,
    pub target_acc: Option<f64>,
    pub mask_size: usize,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let target = self.target_acc.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.stage, self.loss, self.pdd, self.val_acc, target, self.mask_size
        )
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub epochs_completed: usize,
    pub config_hash: String,
    pub config: TrainConfig,
    pub split: DomainSplit,
    pub params: EncoderParams,
    pub optimizer: OptimizerState,
    pub mask: Option<SimilarityMask>,
    pub val_acc: Option<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self).map_err(io::Error::from)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let reader = BufReader::new(File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(reader)
            .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(TrainError::Checkpoint(format!(
                "unsupported format {:?}",
                ckpt.format
            )));
        }
        if ckpt.config.hash() != ckpt.config_hash {
            return Err(TrainError::Checkpoint("config hash mismatch".into()));
        }
        Ok(ckpt)
    }
}

/// Receives progress while training runs.
pub trait TrainObserver {
    /// Called at every evaluation point with the state after that epoch.
    fn on_record(&mut self, _record: &MetricsRecord, _snapshot: &Checkpoint) -> io::Result<()> {
        Ok(())
    }

    /// Called whenever a promoted pair set is computed. `node_ids` maps
    /// training-graph indices back to the input graph.
    fn on_mask(&mut self, _mask: &SimilarityMask, _node_ids: &[usize]) -> io::Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Writes metrics rows to a CSV file, flushing after each row.
pub struct CsvMetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> CsvMetricsWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> io::Result<()> {
        writeln!(self.out, "{}", record.csv_row())?;
        self.out.flush()
    }
}

/// Fixed inputs of a run: the training subgraph and the evaluation splits.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub split: DomainSplit,
    pub train_graph: Graph,
    /// Input-graph id of each training node.
    pub train_node_ids: Vec<usize>,
    full_features: Matrix,
    full_adjacency: Arc<NormalizedAdjacency>,
    full_labels: Vec<usize>,
    num_classes: usize,
    val_nodes: Vec<usize>,
    target_nodes: Vec<usize>,
    cross_pairs: usize,
}

impl TrainSetup {
    pub fn new(graph: &Graph, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let s = &cfg.split;
        let split = make_split(graph.num_domains(), s.n_source, s.n_val, s.n_target, s.seed)?;
        Self::with_split(graph, cfg, split)
    }

    pub fn with_split(graph: &Graph, cfg: &TrainConfig, split: DomainSplit) -> Result<Self, TrainError> {
        cfg.validate()?;
        let sub = graph.restrict_to_domains(&split.source)?;
        if sub.graph.num_nodes() > cfg.max_nodes {
            return Err(TrainError::Config(format!(
                "{} training nodes exceed max_nodes ({})",
                sub.graph.num_nodes(),
                cfg.max_nodes
            )));
        }
        let cross_pairs = cross_domain_count(sub.graph.domains());
        Ok(Self {
            val_nodes: graph.nodes_in_domains(&split.validation),
            target_nodes: graph.nodes_in_domains(&split.target),
            split,
            train_graph: sub.graph,
            train_node_ids: sub.node_ids,
            full_features: graph.features().clone(),
            full_adjacency: NormalizedAdjacency::from_graph(graph),
            full_labels: graph.labels().to_vec(),
            num_classes: graph.num_classes(),
            cross_pairs,
        })
    }

    /// Number of ordered cross-domain pairs among training nodes.
    pub fn cross_pairs(&self) -> usize {
        self.cross_pairs
    }

    /// Encoder output for every node of the input graph, un-augmented.
    pub fn embed_all(&self, params: &EncoderParams) -> Result<Matrix, TrainError> {
        Ok(params.embed(&self.full_adjacency, &self.full_features)?)
    }

    fn labels_of(&self, nodes: &[usize]) -> Vec<usize> {
        nodes.iter().map(|&i| self.full_labels[i]).collect()
    }

    /// Returns `(source pdd, validation accuracy, target accuracy)`.
    pub fn evaluate(
        &self,
        params: &EncoderParams,
        probe: &ProbeConfig,
    ) -> Result<(f64, f64, Option<f64>), TrainError> {
        let h = self.embed_all(params)?;
        let source = h.select(Axis(0), &self.train_node_ids);
        let discrepancy = pdd(&source, self.train_graph.domains())?.value;
        let probe = LinearProbe::fit(
            &source,
            self.train_graph.labels(),
            self.num_classes,
            probe,
        )?;
        let val = probe.accuracy(
            &h.select(Axis(0), &self.val_nodes),
            &self.labels_of(&self.val_nodes),
        )?;
        let target = if self.target_nodes.is_empty() {
            None
        } else {
            Some(probe.accuracy(
                &h.select(Axis(0), &self.target_nodes),
                &self.labels_of(&self.target_nodes),
            )?)
        };
        Ok((discrepancy, val, target))
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Highest validation accuracy over logged records, earliest on ties.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub records: Vec<MetricsRecord>,
}

fn initial_checkpoint(setup: &TrainSetup, cfg: &TrainConfig) -> Checkpoint {
    let widths = cfg.widths(setup.train_graph.num_features());
    let params = EncoderParams::init(&widths, cfg.projection_head, derive_seed(cfg.seed, 0));
    let optimizer = OptimizerState::new(cfg.optimizer, params.iter());
    Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        epochs_completed: 0,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        split: setup.split.clone(),
        params,
        optimizer,
        mask: None,
        val_acc: None,
    }
}

pub fn train(graph: &Graph, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(graph, cfg, &mut ())
}

pub fn train_with(
    graph: &Graph,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    let setup = TrainSetup::new(graph, cfg)?;
    let state = initial_checkpoint(&setup, cfg);
    run(&setup, state, observer)
}

/// Continues from a checkpoint with its stored configuration. The best
/// checkpoint of the outcome covers only the resumed epochs.
pub fn resume(
    graph: &Graph,
    checkpoint: Checkpoint,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    let setup = TrainSetup::with_split(graph, &checkpoint.config, checkpoint.split.clone())?;
    run(&setup, checkpoint, observer)
}

fn run(
    setup: &TrainSetup,
    mut state: Checkpoint,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    let cfg = state.config.clone();
    let graph = &setup.train_graph;
    let domains = graph.domains();
    let r = promoted_count(cfg.loss.nap_ratio, setup.cross_pairs);
    let tau = cfg.loss.tau;

    let mut records = Vec::new();
    let mut best: Option<Checkpoint> = None;

    for epoch in state.epochs_completed..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, 1 + epoch as u64);
        let (view_a, view_b) = make_views(
            graph,
            &cfg.augment_alpha,
            &cfg.augment_beta,
            derive_seed(epoch_seed, 0),
        );

        let mut tape = Tape::new();
        let (layers, proj) = state.params.register(&mut tape);
        let non_finite = |source| TrainError::NonFiniteLoss { epoch, source };

        let xa = tape.constant(view_a.graph.features().clone());
        let xb = tape.constant(view_b.graph.features().clone());
        let mut za = gcn_forward(&mut tape, &view_a.adjacency, xa, &layers).map_err(non_finite)?;
        let mut zb = gcn_forward(&mut tape, &view_b.adjacency, xb, &layers).map_err(non_finite)?;
        if !proj.is_empty() {
            za = project(&mut tape, za, &proj).map_err(non_finite)?;
            zb = project(&mut tape, zb, &proj).map_err(non_finite)?;
        }

        let stage = if epoch < cfg.loss.warmup_epochs {
            Stage::Warmup
        } else {
            Stage::Nap
        };
        let loss = match stage {
            Stage::Warmup => cdp_removal_loss(
                &mut tape,
                za,
                zb,
                cfg.loss.cdp_removal_ratio,
                derive_seed(epoch_seed, 1),
                tau,
                domains,
            ),
            Stage::Nap => {
                let refresh = match cfg.mask_refresh {
                    MaskRefresh::EveryEpoch => true,
                    MaskRefresh::Once => state.mask.is_none(),
                };
                if refresh {
                    let b = cosine_similarity_matrix(tape.value(za), tape.value(zb))?;
                    let b = zero_same_domain(&b, domains);
                    let mask = select_top_r(&b, domains, r, epoch);
                    observer.on_mask(&mask, &setup.train_node_ids)?;
                    state.mask = Some(mask);
                }
                let mask = state.mask.as_ref().expect("mask set above");
                contrastive_loss(&mut tape, za, zb, mask, tau)
            }
        }
        .map_err(non_finite)?;

        let loss_value = tape.scalar(loss);
        let mut grads = tape.backward(loss)?;
        state.params.collect_grads(&mut grads, &layers, &proj);
        optimizer_step(state.params.iter_mut(), &mut state.optimizer)?;
        state.epochs_completed = epoch + 1;

        if cfg.is_eval_epoch(epoch) {
            let (discrepancy, val_acc, target_acc) = setup.evaluate(&state.params, &cfg.probe)?;
            state.val_acc = Some(val_acc);
            let record = MetricsRecord {
                epoch,
                stage,
                loss: loss_value,
                pdd: discrepancy,
                val_acc,
                target_acc,
                mask_size: match stage {
                    Stage::Warmup => 0,
                    Stage::Nap => state.mask.as_ref().map_or(0, SimilarityMask::len),
                },
            };
            observer.on_record(&record, &state)?;
            if best.as_ref().and_then(|b| b.val_acc).is_none_or(|b| val_acc > b) {
                best = Some(state.clone());
            }
            records.push(record);
        }
    }

    let last = state;
    Ok(TrainOutcome {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        records,
    })
}

/// Final source discrepancy of one ablation run.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub q: f64,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub final_pdd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub q: f64,
    pub mean_final_pdd: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("q,mean_final_pdd\n");
        for row in &self.rows {
            out.push_str(&format!("{},{}\n", row.q, row.mean_final_pdd));
        }
        out
    }
}

/// Trains with the pair-removal loss for every epoch at each removal ratio
/// and seed, and averages the final source discrepancy over seeds.
///
/// Runs are independent and execute on separate threads.
pub fn run_ablation_cdp_removal(
    graph: &Graph,
    base: &TrainConfig,
    q_values: &[f64],
    seeds: &[u64],
) -> Result<AblationTable, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("ablation needs at least one seed".into()));
    }
    let configs: Vec<(f64, u64, TrainConfig)> = q_values
        .iter()
        .flat_map(|&q| {
            seeds.iter().map(move |&seed| {
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.loss.cdp_removal_ratio = q;
                cfg.loss.warmup_epochs = cfg.epochs;
                (q, seed, cfg)
            })
        })
        .collect();
    for (_, _, cfg) in &configs {
        cfg.validate()?;
    }

    let results: Vec<Result<AblationRun, TrainError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|(q, seed, cfg)| {
                scope.spawn(move || {
                    let outcome = train(graph, cfg)?;
                    let final_pdd = outcome.records.last().map_or(f64::NAN, |r| r.pdd);
                    Ok(AblationRun {
                        q: *q,
                        seed: *seed,
                        records: outcome.records,
                        final_pdd,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let rows = q_values
        .iter()
        .map(|&q| {
            let pdds: Vec<f64> = runs.iter().filter(|r| r.q == q).map(|r| r.final_pdd).collect();
            AblationRow {
                q,
                mean_final_pdd: pdds.iter().sum::<f64>() / pdds.len() as f64,
            }
        })
        .collect();
    Ok(AblationTable { rows, runs })
}
