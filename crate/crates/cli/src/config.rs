//! Experiment configuration: a flat `key = value` file with `[section]` headers.
//!
//! ```text
//! [data]
//! content = data/cora/cora.content
//! cites = data/cora/cora.cites
//!
//! [model]
//! arch = gcn
//!
//! [run]
//! seed = 0
//! out = runs/cora-gcn
//! ```
//!
//! Relative paths are resolved against the directory holding the file. Unknown
//! sections or keys are rejected so typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gnn_unlearn::gnn::{Architecture, ModelSpec};
use gnn_unlearn::trainer::TrainConfig;
use gnn_unlearn::unlearn::{LossReduction, TemperaturePlacement, UnlearnConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Planetoid `.content` and `.cites` files.
    Raw { content: PathBuf, cites: PathBuf },
    /// Directory written by `ingest`.
    Ingested(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub arch: Architecture,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub dropout: f64,
    pub gin_eps: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = ModelSpec::new(Architecture::Gcn, 1, 1);
        Self {
            arch: d.arch,
            hidden_dim: d.hidden_dim,
            embed_dim: d.embed_dim,
            layers: d.layers,
            dropout: d.dropout,
            gin_eps: d.gin_eps,
        }
    }
}

impl ModelSettings {
    pub fn spec(&self, in_dim: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            layers: self.layers,
            dropout: self.dropout,
            gin_eps: self.gin_eps,
            ..ModelSpec::new(self.arch, in_dim, num_classes)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSettings {
    pub test_fraction: f64,
    pub unlearn_fraction: f64,
    pub eval_fraction: f64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            test_fraction: 0.1,
            unlearn_fraction: 0.1,
            eval_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub model: ModelSettings,
    pub split: SplitSettings,
    pub train: TrainConfig,
    /// `k` is overwritten with the model depth when the run starts.
    pub unlearn: UnlearnConfig,
    pub n_shadow: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Shadow-training threads; 0 uses every core.
    pub jobs: usize,
    pub retain_structure: bool,
    /// Unlearning ratios swept by `experiment`; defaults to the split's ratio.
    pub ratios: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let cora = PathBuf::from("data/cora");
        Self {
            data: DataSource::Raw {
                content: cora.join("cora.content"),
                cites: cora.join("cora.cites"),
            },
            model: ModelSettings::default(),
            split: SplitSettings::default(),
            train: TrainConfig::default(),
            unlearn: UnlearnConfig::default(),
            n_shadow: 16,
            seed: 0,
            out: PathBuf::from("runs/default"),
            jobs: 0,
            retain_structure: false,
            ratios: Vec::new(),
        }
    }
}

type Sections = BTreeMap<String, BTreeMap<String, (usize, String)>>;

fn parse_sections(text: &str) -> CliResult<Sections> {
    let mut out: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim().to_string();
            out.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::config(line_no, format!("expected `key = value`, got `{line}`")));
        };
        let Some(section) = &current else {
            return Err(CliError::config(line_no, "key outside of any [section]"));
        };
        let key = k.trim().to_string();
        let entries = out.get_mut(section).expect("section inserted on header");
        if entries.insert(key.clone(), (line_no, v.trim().to_string())).is_some() {
            return Err(CliError::config(line_no, format!("duplicate key `{key}`")));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    section: &'a str,
    entries: BTreeMap<String, (usize, String)>,
}

impl Reader<'_> {
    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> CliResult<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, v)) = self.entries.remove(key) {
            *slot = v
                .parse()
                .map_err(|e| CliError::config(line, format!("{}.{key}: {e}", self.section)))?;
        }
        Ok(())
    }

    fn take_path(&mut self, key: &str, base: &Path) -> Option<PathBuf> {
        self.entries.remove(key).map(|(_, v)| base.join(v))
    }

    fn finish(self) -> CliResult<()> {
        match self.entries.into_iter().next() {
            Some((k, (line, _))) => Err(CliError::config(line, format!("unknown key `{}.{k}`", self.section))),
            None => Ok(()),
        }
    }
}

fn parse_choice<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown value `{s}`"))
}

#[derive(Clone, Copy)]
struct Choice<T>(T);

impl<T: serde::de::DeserializeOwned> FromStr for Choice<T> {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        parse_choice(s).map(Choice)
    }
}

impl ExperimentConfig {
    /// Parses configuration text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let mut sections = parse_sections(text)?;
        let mut cfg = Self::default();
        let mut reader = |name: &'static str| Reader {
            section: name,
            entries: sections.remove(name).unwrap_or_default(),
        };

        let mut r = reader("data");
        let dataset = r.take_path("dataset", base);
        let content = r.take_path("content", base);
        let cites = r.take_path("cites", base);
        r.finish()?;
        cfg.data = match (dataset, content, cites) {
            (Some(d), None, None) => DataSource::Ingested(d),
            (None, Some(content), Some(cites)) => DataSource::Raw { content, cites },
            (None, None, None) => cfg.data,
            _ => return Err(CliError::Usage("[data] needs either `dataset` or both `content` and `cites`".into())),
        };

        let mut r = reader("model");
        let m = &mut cfg.model;
        r.take("arch", &mut m.arch)?;
        r.take("hidden_dim", &mut m.hidden_dim)?;
        r.take("embed_dim", &mut m.embed_dim)?;
        r.take("layers", &mut m.layers)?;
        r.take("dropout", &mut m.dropout)?;
        r.take("gin_eps", &mut m.gin_eps)?;
        r.finish()?;

        let mut r = reader("split");
        r.take("test_fraction", &mut cfg.split.test_fraction)?;
        r.take("unlearn_fraction", &mut cfg.split.unlearn_fraction)?;
        r.take("eval_fraction", &mut cfg.split.eval_fraction)?;
        r.finish()?;

        let mut r = reader("train");
        r.take("max_epochs", &mut cfg.train.max_epochs)?;
        r.take("lr", &mut cfg.train.lr)?;
        r.take("weight_decay", &mut cfg.train.weight_decay)?;
        r.take("patience", &mut cfg.train.patience)?;
        r.finish()?;

        let mut r = reader("unlearn");
        let u = &mut cfg.unlearn;
        r.take("tau", &mut u.tau)?;
        r.take("beta", &mut u.beta)?;
        r.take("gamma", &mut u.gamma)?;
        r.take("omega", &mut u.omega)?;
        r.take("batch_size_u", &mut u.batch_size_u)?;
        r.take("batch_size_r", &mut u.batch_size_r)?;
        r.take("max_rounds", &mut u.max_rounds)?;
        r.take("lr", &mut u.lr)?;
        r.take("normalize", &mut u.normalize)?;
        r.take("reconstruction", &mut u.reconstruction)?;
        let mut temp = Choice::<TemperaturePlacement>(u.temperature);
        r.take("temperature", &mut temp)?;
        u.temperature = temp.0;
        let mut red = Choice::<LossReduction>(u.reduction);
        r.take("reduction", &mut red)?;
        u.reduction = red.0;
        r.finish()?;

        let mut r = reader("attack");
        r.take("n_shadow", &mut cfg.n_shadow)?;
        r.finish()?;

        let mut r = reader("run");
        r.take("seed", &mut cfg.seed)?;
        if let Some(out) = r.take_path("out", base) {
            cfg.out = out;
        }
        r.take("jobs", &mut cfg.jobs)?;
        r.take("retain_structure", &mut cfg.retain_structure)?;
        let mut ratios = String::new();
        r.take("ratios", &mut ratios)?;
        if !ratios.is_empty() {
            cfg.ratios = parse_ratios(&ratios)?;
        }
        r.finish()?;

        if let Some(name) = sections.keys().next() {
            return Err(CliError::Usage(format!("unknown config section [{name}]")));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Checks values and that every input path exists.
    pub fn validate(&self) -> CliResult<()> {
        let paths: Vec<&Path> = match &self.data {
            DataSource::Raw { content, cites } => vec![content, cites],
            DataSource::Ingested(d) => vec![d],
        };
        for p in paths {
            if !p.exists() {
                return Err(CliError::MissingInput(p.to_path_buf()));
            }
        }
        self.train.validate()?;
        self.unlearn.validate()?;
        if self.n_shadow < 2 {
            return Err(CliError::Usage(format!("n_shadow must be at least 2, got {}", self.n_shadow)));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(CliError::Usage(format!("unlearning ratio {r} is outside (0, 1)")));
        }
        Ok(())
    }

    /// Ratios to run: the sweep if one was given, else the split's ratio.
    pub fn sweep(&self) -> Vec<f64> {
        if self.ratios.is_empty() {
            vec![self.split.unlearn_fraction]
        } else {
            self.ratios.clone()
        }
    }

    /// Canonical text form; parsing it back yields the same configuration when all
    /// paths are absolute.
    pub fn to_text(&self) -> String {
        let mut s = String::from("[data]\n");
        match &self.data {
            DataSource::Raw { content, cites } => {
                s.push_str(&format!("content = {}\ncites = {}\n", content.display(), cites.display()));
            }
            DataSource::Ingested(d) => s.push_str(&format!("dataset = {}\n", d.display())),
        }
        let m = &self.model;
        s.push_str(&format!(
            "\n[model]\narch = {}\nhidden_dim = {}\nembed_dim = {}\nlayers = {}\ndropout = {}\ngin_eps = {}\n",
            m.arch, m.hidden_dim, m.embed_dim, m.layers, m.dropout, m.gin_eps
        ));
        s.push_str(&format!(
            "\n[split]\ntest_fraction = {}\nunlearn_fraction = {}\neval_fraction = {}\n",
            self.split.test_fraction, self.split.unlearn_fraction, self.split.eval_fraction
        ));
        let t = &self.train;
        s.push_str(&format!(
            "\n[train]\nmax_epochs = {}\nlr = {}\nweight_decay = {}\npatience = {}\n",
            t.max_epochs, t.lr, t.weight_decay, t.patience
        ));
        let u = &self.unlearn;
        let name = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
        s.push_str(&format!(
            "\n[unlearn]\ntau = {}\nbeta = {}\ngamma = {}\nomega = {}\nbatch_size_u = {}\nbatch_size_r = {}\n\
             max_rounds = {}\nlr = {}\nnormalize = {}\nreconstruction = {}\ntemperature = {}\nreduction = {}\n",
            u.tau,
            u.beta,
            u.gamma,
            u.omega,
            u.batch_size_u,
            u.batch_size_r,
            u.max_rounds,
            u.lr,
            u.normalize,
            u.reconstruction,
            name(serde_json::to_value(u.temperature).unwrap_or_default()),
            name(serde_json::to_value(u.reduction).unwrap_or_default()),
        ));
        s.push_str(&format!("\n[attack]\nn_shadow = {}\n", self.n_shadow));
        s.push_str(&format!(
            "\n[run]\nseed = {}\nout = {}\njobs = {}\nretain_structure = {}\n",
            self.seed,
            self.out.display(),
            self.jobs,
            self.retain_structure
        ));
        if !self.ratios.is_empty() {
            let r: Vec<String> = self.ratios.iter().map(f64::to_string).collect();
            s.push_str(&format!("ratios = {}\n", r.join(",")));
        }
        s
    }
}

pub fn parse_ratios(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|r| {
            r.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Usage(format!("bad ratio `{r}`: {e}")))
        })
        .collect()
}
