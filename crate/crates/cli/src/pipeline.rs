//! Library side of the commands: dataset loading, artifact I/O and the experiment
//! pipeline. Everything here is deterministic given the configuration.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use gnn_unlearn::attack::{attack, select_mia_nodes, train_shadows, MiaNodes, MiaResult, ShadowConfidences, FPR_TARGETS};
use gnn_unlearn::gnn::{read_checkpoint, write_checkpoint, GnnModel, ModelSpec};
use gnn_unlearn::graph::{
    edge_checksum, load_planetoid, read_graph_binary, split_nodes, write_graph_binary, DatasetManifest, Graph,
    NodePartition,
};
use gnn_unlearn::trainer::{accuracies, retrain_reference, train, RetrainStructure, TrainConfig, TrainLog};
use gnn_unlearn::unlearn::{run_node_cul, UnlearnConfig, UnlearnReport};
use log::info;

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, CliResult};

pub const GRAPH_FILE: &str = "graph.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::MissingInput(path.to_path_buf())),
        Err(e) => Err(CliError::io(path, e)),
    }
}

fn with_path<T>(path: &Path, r: gnn_unlearn::error::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        e if e.is_numeric() => CliError::Core(e),
        e => CliError::Artifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        },
    })
}

/// Parses raw Planetoid files into the canonical graph and its manifest.
pub fn load_raw(content: &Path, cites: &Path) -> CliResult<(Graph, DatasetManifest)> {
    let parsed = load_planetoid(open(content)?, open(cites)?).map_err(|e| {
        // Line numbers are per file; reparse the content alone to tell which one failed.
        let content_ok = open(content)
            .map(|r| load_planetoid(r, &b""[..]).is_ok())
            .unwrap_or(false);
        CliError::Artifact {
            path: if content_ok { cites } else { content }.to_path_buf(),
            message: e.to_string(),
        }
    })?;
    let manifest = DatasetManifest::new(&parsed.graph, parsed.stats);
    Ok((parsed.graph, manifest))
}

/// Writes `graph.bin` and `manifest.txt` into `dir`.
pub fn write_dataset(dir: &Path, graph: &Graph, manifest: &DatasetManifest) -> CliResult<()> {
    let mut bin = Vec::new();
    write_graph_binary(graph, &mut bin)?;
    write_atomic(&dir.join(GRAPH_FILE), &bin)?;
    write_atomic(&dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())
}

/// Reads an ingested dataset directory, checking the graph against its manifest.
pub fn read_dataset(dir: &Path) -> CliResult<Graph> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingInput(manifest_path.clone()),
        _ => CliError::io(&manifest_path, e),
    })?;
    let manifest = with_path(&manifest_path, DatasetManifest::parse(&text))?;
    let graph_path = dir.join(GRAPH_FILE);
    let graph = with_path(&graph_path, read_graph_binary(open(&graph_path)?))?;
    let found = edge_checksum(&graph);
    if found != manifest.edge_checksum
        || graph.num_nodes() != manifest.num_nodes
        || graph.feature_dim() != manifest.feature_dim
        || graph.num_classes() != manifest.num_classes
    {
        return Err(CliError::Artifact {
            path: graph_path,
            message: "graph does not match its manifest".into(),
        });
    }
    Ok(graph)
}

pub fn load_graph(source: &DataSource) -> CliResult<Graph> {
    match source {
        DataSource::Raw { content, cites } => load_raw(content, cites).map(|(g, _)| g),
        DataSource::Ingested(dir) => read_dataset(dir),
    }
}

pub fn save_model(path: &Path, model: &GnnModel) -> CliResult<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    write_atomic(path, &bytes)
}

pub fn load_model(path: &Path) -> CliResult<GnnModel> {
    with_path(path, read_checkpoint(open(path)?))
}

/// A loaded dataset plus the settings every command derives from the configuration.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub graph: Graph,
    pub spec: ModelSpec,
}

impl Session {
    pub fn open(cfg: ExperimentConfig) -> CliResult<Self> {
        cfg.validate()?;
        let graph = load_graph(&cfg.data)?;
        let spec = cfg.model.spec(graph.feature_dim(), graph.num_classes());
        spec.validate()?;
        Ok(Self { cfg, graph, spec })
    }

    pub fn with_graph(cfg: ExperimentConfig, graph: Graph) -> CliResult<Self> {
        let spec = cfg.model.spec(graph.feature_dim(), graph.num_classes());
        spec.validate()?;
        Ok(Self { cfg, graph, spec })
    }

    pub fn partition(&self, ratio: f64) -> CliResult<NodePartition> {
        let s = &self.cfg.split;
        Ok(split_nodes(
            self.graph.num_nodes(),
            self.cfg.seed,
            s.test_fraction,
            ratio,
            s.eval_fraction,
        )?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.cfg.seed,
            ..self.cfg.train.clone()
        }
    }

    pub fn unlearn_config(&self) -> UnlearnConfig {
        UnlearnConfig {
            seed: self.cfg.seed,
            k: self.spec.layers,
            ..self.cfg.unlearn.clone()
        }
    }

    pub fn retrain_structure(&self) -> RetrainStructure {
        if self.cfg.retain_structure {
            RetrainStructure::Retain
        } else {
            RetrainStructure::Delete
        }
    }

    pub fn train(&self, partition: &NodePartition) -> CliResult<(GnnModel, TrainLog)> {
        Ok(train(&self.graph, partition, &self.spec, &self.train_config())?)
    }

    pub fn retrain(&self, partition: &NodePartition) -> CliResult<(GnnModel, TrainLog)> {
        Ok(retrain_reference(
            &self.graph,
            partition,
            &self.spec,
            &self.train_config(),
            self.retrain_structure(),
        )?)
    }

    pub fn unlearn(&self, model: &GnnModel, partition: &NodePartition) -> CliResult<(GnnModel, UnlearnReport)> {
        Ok(run_node_cul(model, &self.graph, partition, &self.unlearn_config())?)
    }

    pub fn evaluate(&self, model: &GnnModel, partition: &NodePartition) -> CliResult<Evaluation> {
        let p = partition;
        let acc = accuracies(
            model,
            &self.graph,
            &[&p.train, &p.test, &p.unlearn, &p.remain, &p.eval],
        )?;
        Ok(Evaluation {
            train: acc[0],
            test: acc[1],
            unlearn: acc[2],
            remain: acc[3],
            eval: acc[4],
        })
    }

    /// Trains the shadow ensemble for this partition's forgotten nodes.
    pub fn shadows(&self, partition: &NodePartition) -> CliResult<(MiaNodes, ShadowConfidences)> {
        let nodes = select_mia_nodes(partition, self.cfg.seed)?;
        let ensemble = train_shadows(
            &self.graph,
            partition,
            &nodes.candidates(),
            self.cfg.n_shadow,
            &self.spec,
            &self.train_config(),
            self.cfg.seed,
            self.cfg.jobs,
        )?;
        let conf = ShadowConfidences::collect(&ensemble, &self.graph)?;
        Ok((nodes, conf))
    }

    pub fn attack(&self, model: &GnnModel, nodes: &MiaNodes, conf: &ShadowConfidences) -> CliResult<MiaResult> {
        Ok(attack(model, &self.graph, conf, nodes)?)
    }
}

/// Accuracies of one model on every node role.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub train: f64,
    pub test: f64,
    pub unlearn: f64,
    pub remain: f64,
    pub eval: f64,
}

impl Evaluation {
    /// `|acc(test) − acc(V_u)|` in percentage points.
    pub fn unlearn_score(&self) -> f64 {
        (self.test - self.unlearn).abs() * 100.0
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (name, v) in [
            ("acc_train", self.train),
            ("acc_test", self.test),
            ("acc_unlearn", self.unlearn),
            ("acc_remain", self.remain),
            ("acc_eval", self.eval),
            ("unlearn_score", self.unlearn_score()),
        ] {
            let _ = writeln!(s, "{name},{v:.6}");
        }
        s
    }
}

pub fn mia_json(result: &MiaResult) -> CliResult<String> {
    serde_json::to_string_pretty(result).map_err(|e| CliError::Usage(format!("serializing MIA result: {e}")))
}

pub fn report_json(report: &UnlearnReport) -> CliResult<String> {
    serde_json::to_string_pretty(report).map_err(|e| CliError::Usage(format!("serializing report: {e}")))
}

pub fn rounds_csv(report: &UnlearnReport) -> String {
    let mut s = String::from("round,acc_unlearn,acc_eval\n");
    for m in &report.history {
        let _ = writeln!(s, "{},{},{}", m.round, m.acc_unlearn, m.acc_eval);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelRole {
    Original,
    NodeCul,
    Retrain,
}

impl ModelRole {
    pub fn name(self) -> &'static str {
        match self {
            ModelRole::Original => "original",
            ModelRole::NodeCul => "node_cul",
            ModelRole::Retrain => "retrain",
        }
    }
}

/// One line of the summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub ratio: f64,
    pub role: ModelRole,
    pub eval: Evaluation,
    pub mia: Option<MiaSummary>,
    pub rounds: Option<usize>,
    pub runtime_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiaSummary {
    pub auc: f64,
    /// TPR at each of `FPR_TARGETS`.
    pub tpr: Vec<f64>,
}

impl From<&MiaResult> for MiaSummary {
    fn from(r: &MiaResult) -> Self {
        Self {
            auc: r.auc,
            tpr: FPR_TARGETS.iter().map(|&f| r.tpr_at(f).unwrap_or(f64::NAN)).collect(),
        }
    }
}

pub const SUMMARY_HEADER: &str =
    "ratio,model,test_acc,unlearn_acc,eval_acc,unlearn_score,auc,tpr@0.01,tpr@0.05,tpr@0.1,rounds,runtime_secs";

/// Accuracies and the score are in percent. Runtime is the last column so it can be
/// stripped when comparing runs.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let (auc, tpr) = match &r.mia {
            Some(m) => (
                format!("{:.6}", m.auc),
                m.tpr.iter().map(|t| format!("{t:.6}")).collect::<Vec<_>>().join(","),
            ),
            None => (String::new(), ",,".to_string()),
        };
        let rounds = r.rounds.map(|n| n.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{:.4},{:.4},{auc},{tpr},{rounds},{:.3}",
            r.ratio,
            r.role.name(),
            r.eval.test * 100.0,
            r.eval.unlearn * 100.0,
            r.eval.eval * 100.0,
            r.eval.unlearn_score(),
            r.runtime_secs,
        );
    }
    s
}

/// The trained original model, shared by every ratio of a sweep. The training set does
/// not depend on the unlearning ratio, so one model serves them all.
pub struct Trained {
    pub model: GnnModel,
    pub log: TrainLog,
    pub runtime_secs: f64,
}

pub fn train_original(session: &Session) -> CliResult<Trained> {
    let partition = session.partition(session.cfg.sweep()[0])?;
    let started = Instant::now();
    let (model, log) = session.train(&partition)?;
    Ok(Trained {
        model,
        log,
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

/// Everything produced for one unlearning ratio.
pub struct RatioOutcome {
    pub ratio: f64,
    pub partition: NodePartition,
    pub unlearned: GnnModel,
    pub report: UnlearnReport,
    pub retrained: GnnModel,
    pub retrain_log: TrainLog,
    pub mia: Option<[MiaResult; 3]>,
    pub rows: Vec<SummaryRow>,
}

/// Unlearns, retrains, evaluates and (optionally) attacks all three models at `ratio`.
pub fn run_ratio(session: &Session, original: &Trained, ratio: f64, with_mia: bool) -> CliResult<RatioOutcome> {
    let partition = session.partition(ratio)?;
    info!("ratio {ratio}: unlearning {} nodes", partition.unlearn.len());
    let (unlearned, report) = session.unlearn(&original.model, &partition)?;
    info!(
        "ratio {ratio}: {} rounds, termination {:?}",
        report.rounds, report.termination
    );
    let started = Instant::now();
    let (retrained, retrain_log) = session.retrain(&partition)?;
    let retrain_secs = started.elapsed().as_secs_f64();

    let mia = if with_mia {
        info!("ratio {ratio}: training {} shadow models", session.cfg.n_shadow);
        let (nodes, conf) = session.shadows(&partition)?;
        Some([
            session.attack(&original.model, &nodes, &conf)?,
            session.attack(&unlearned, &nodes, &conf)?,
            session.attack(&retrained, &nodes, &conf)?,
        ])
    } else {
        None
    };

    let models = [
        (ModelRole::Original, &original.model, None, original.runtime_secs),
        (ModelRole::NodeCul, &unlearned, Some(report.rounds), report.wall_time_secs),
        (ModelRole::Retrain, &retrained, None, retrain_secs),
    ];
    let mut rows = Vec::with_capacity(3);
    for (i, (role, model, rounds, runtime_secs)) in models.into_iter().enumerate() {
        rows.push(SummaryRow {
            ratio,
            role,
            eval: session.evaluate(model, &partition)?,
            mia: mia.as_ref().map(|m| MiaSummary::from(&m[i])),
            rounds,
            runtime_secs,
        });
    }
    Ok(RatioOutcome {
        ratio,
        partition,
        unlearned,
        report,
        retrained,
        retrain_log,
        mia,
        rows,
    })
}

pub fn ratio_dir(out: &Path, ratio: f64) -> PathBuf {
    out.join(format!("ratio_{ratio}"))
}

/// Writes one ratio's checkpoints and reports under `ratio_<r>/`.
pub fn write_ratio(out: &Path, outcome: &RatioOutcome) -> CliResult<()> {
    let dir = ratio_dir(out, outcome.ratio);
    save_model(&dir.join("unlearned.ckpt"), &outcome.unlearned)?;
    save_model(&dir.join("retrain.ckpt"), &outcome.retrained)?;
    write_atomic(&dir.join("unlearn_report.json"), report_json(&outcome.report)?.as_bytes())?;
    write_atomic(&dir.join("unlearn_rounds.csv"), rounds_csv(&outcome.report).as_bytes())?;
    write_atomic(&dir.join("retrain_log.csv"), outcome.retrain_log.to_csv().as_bytes())?;
    if let Some(results) = &outcome.mia {
        for (role, r) in [ModelRole::Original, ModelRole::NodeCul, ModelRole::Retrain]
            .into_iter()
            .zip(results)
        {
            write_atomic(&dir.join(format!("mia_{}.json", role.name())), mia_json(r)?.as_bytes())?;
            write_atomic(&dir.join(format!("roc_{}.csv", role.name())), r.roc_csv().as_bytes())?;
        }
    }
    Ok(())
}

/// Full pipeline over the configured ratio sweep; writes every artifact and
/// `summary.csv` under the output directory.
pub fn run_experiment(session: &Session) -> CliResult<Vec<SummaryRow>> {
    let out = &session.cfg.out;
    write_atomic(&out.join("config.txt"), session.cfg.to_text().as_bytes())?;
    let original = train_original(session)?;
    save_model(&out.join("original.ckpt"), &original.model)?;
    write_atomic(&out.join("train_log.csv"), original.log.to_csv().as_bytes())?;
    let mut rows = Vec::new();
    for ratio in session.cfg.sweep() {
        let outcome = run_ratio(session, &original, ratio, true)?;
        write_ratio(out, &outcome)?;
        rows.extend(outcome.rows);
        write_atomic(&out.join("summary.csv"), summary_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}
