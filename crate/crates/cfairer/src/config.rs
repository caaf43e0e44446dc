//! Line-oriented run configuration: `section.key=value` pairs with `#`
//! comments, defaults for every field, and a resolved-config echo written
//! next to each run's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::cfe::CfeConfig;
use crate::error::{Error, Result};
use crate::graphrep::GraphRepConfig;
use crate::harness::SyntheticConfig;
use crate::recsys::TrainConfig;

/// Fully resolved pipeline configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Master seed; module seeds are derived from it deterministically.
    pub seed: u64,
    pub out_dir: PathBuf,

    /// Interactions TSV; when absent the synthetic generator is used.
    pub interactions_path: Option<PathBuf>,
    pub user_attrs_path: Option<PathBuf>,
    pub item_attrs_path: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub k_core: usize,
    pub rating_threshold: f64,
    pub fractions: (f64, f64, f64),

    pub rec: TrainConfig,
    pub graph: GraphRepConfig,
    pub cfe: CfeConfig,

    pub lambda: f64,
    /// None: derived from the group split (proportional-allocation value).
    pub alpha: Option<f64>,
    pub epsilon: f64,

    pub erasure_length: usize,
    /// Per-user explanation budget; 0 means "use the erasure length".
    pub budget: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            interactions_path: None,
            user_attrs_path: None,
            item_attrs_path: None,
            synthetic: SyntheticConfig::default(),
            k_core: 10,
            rating_threshold: 4.0,
            fractions: (0.6, 0.2, 0.2),
            rec: TrainConfig {
                dim: 16,
                epochs: 10,
                ..TrainConfig::default()
            },
            graph: GraphRepConfig {
                layer_dims: vec![16, 16],
                out_dim: 16,
                epochs: 10,
                ..GraphRepConfig::default()
            },
            cfe: CfeConfig::default(),
            lambda: 1.0,
            alpha: None,
            epsilon: 0.0,
            erasure_length: 5,
            budget: 0,
        }
    }
}

impl RunConfig {
    /// Parse a config file and fold its pairs over the defaults.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "expected key=value".into(),
            })?;
            cfg.apply(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    /// Set one `section.key` pair; unknown keys are config errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "seed" => {
                self.seed = num(key, value)?;
                self.reseed();
            }
            "out" => self.out_dir = PathBuf::from(value),
            "data.interactions" => self.interactions_path = Some(PathBuf::from(value)),
            "data.user_attrs" => self.user_attrs_path = Some(PathBuf::from(value)),
            "data.item_attrs" => self.item_attrs_path = Some(PathBuf::from(value)),
            "data.k_core" => self.k_core = num(key, value)?,
            "data.threshold" => self.rating_threshold = num(key, value)?,
            "data.fractions" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| num("data.fractions", p.trim()))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::Config("data.fractions needs 3 numbers".into()));
                }
                self.fractions = (parts[0], parts[1], parts[2]);
            }
            "synthetic.users" => self.synthetic.users = num(key, value)?,
            "synthetic.items" => self.synthetic.items = num(key, value)?,
            "synthetic.user_attrs" => self.synthetic.user_attrs = num(key, value)?,
            "synthetic.item_attrs" => self.synthetic.item_attrs = num(key, value)?,
            "synthetic.interactions" => self.synthetic.interactions = num(key, value)?,
            "synthetic.skew" => self.synthetic.skew = num(key, value)?,
            "synthetic.planted" => self.synthetic.planted_attrs = num(key, value)?,
            "synthetic.hubs" => self.synthetic.hub_attrs = num(key, value)?,
            "rec.dim" => self.rec.dim = num(key, value)?,
            "rec.lr" => self.rec.learning_rate = num(key, value)?,
            "rec.l2" => self.rec.l2 = num(key, value)?,
            "rec.epochs" => self.rec.epochs = num(key, value)?,
            "rec.negatives" => self.rec.negative_ratio = num(key, value)?,
            "graph.layers" => {
                self.graph.layer_dims = value
                    .split(',')
                    .map(|p| num("graph.layers", p.trim()))
                    .collect::<Result<_>>()?;
            }
            "graph.out_dim" => self.graph.out_dim = num(key, value)?,
            "graph.buckets" => self.graph.buckets = num(key, value)?,
            "graph.dropout" => self.graph.dropout = num(key, value)?,
            "graph.lr" => self.graph.learning_rate = num(key, value)?,
            "graph.epochs" => self.graph.epochs = num(key, value)?,
            "cfe.state_dim" => self.cfe.state_dim = num(key, value)?,
            "cfe.candidate_size" => self.cfe.candidate_size = num(key, value)?,
            "cfe.episode_len" => self.cfe.episode_len = num(key, value)?,
            "cfe.episodes" => self.cfe.episodes = num(key, value)?,
            "cfe.gamma" => self.cfe.gamma = num(key, value)?,
            "cfe.c_max" => self.cfe.c_max = num(key, value)?,
            "cfe.lr" => self.cfe.learning_rate = num(key, value)?,
            "cfe.end_to_end" => self.cfe.end_to_end = num(key, value)?,
            "fairness.lambda" => self.lambda = num(key, value)?,
            "fairness.alpha" => self.alpha = Some(num(key, value)?),
            "fairness.epsilon" => self.epsilon = num(key, value)?,
            "eval.top_k" => self.cfe.top_k = num(key, value)?,
            "eval.erasure_length" => self.erasure_length = num(key, value)?,
            "eval.budget" => self.budget = num(key, value)?,
            _ => {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
        }
        Ok(())
    }

    /// Derive module seeds from the master seed.
    pub fn reseed(&mut self) {
        self.rec.seed = self.seed;
        self.graph.seed = self.seed.wrapping_add(1);
        self.cfe.seed = self.seed.wrapping_add(2);
        self.synthetic.seed = self.seed.wrapping_add(3);
    }

    pub fn validate(&self) -> Result<()> {
        self.rec.validate()?;
        if self.graph.out_dim != self.rec.dim {
            return Err(Error::Config(format!(
                "graph.out_dim ({}) must equal rec.dim ({}) for fusion",
                self.graph.out_dim, self.rec.dim
            )));
        }
        if self.k_core == 0 {
            return Err(Error::Config("data.k_core must be at least 1".into()));
        }
        if self.cfe.top_k == 0 || self.erasure_length == 0 {
            return Err(Error::Config("eval.top_k and eval.erasure_length must be positive".into()));
        }
        if self.interactions_path.is_none() {
            self.synthetic.validate()?;
        }
        Ok(())
    }

    pub fn explanation_budget(&self) -> usize {
        if self.budget == 0 {
            self.erasure_length
        } else {
            self.budget
        }
    }

    /// Every resolved key, sorted, for the config echo.
    pub fn resolved_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("out", self.out_dir.display().to_string());
        if let Some(p) = &self.interactions_path {
            put("data.interactions", p.display().to_string());
        }
        if let Some(p) = &self.user_attrs_path {
            put("data.user_attrs", p.display().to_string());
        }
        if let Some(p) = &self.item_attrs_path {
            put("data.item_attrs", p.display().to_string());
        }
        put("data.k_core", self.k_core.to_string());
        put("data.threshold", format!("{:?}", self.rating_threshold));
        put(
            "data.fractions",
            format!(
                "{:?},{:?},{:?}",
                self.fractions.0, self.fractions.1, self.fractions.2
            ),
        );
        put("synthetic.users", self.synthetic.users.to_string());
        put("synthetic.items", self.synthetic.items.to_string());
        put("synthetic.user_attrs", self.synthetic.user_attrs.to_string());
        put("synthetic.item_attrs", self.synthetic.item_attrs.to_string());
        put("synthetic.interactions", self.synthetic.interactions.to_string());
        put("synthetic.skew", format!("{:?}", self.synthetic.skew));
        put("synthetic.planted", self.synthetic.planted_attrs.to_string());
        put("synthetic.hubs", self.synthetic.hub_attrs.to_string());
        put("rec.dim", self.rec.dim.to_string());
        put("rec.lr", format!("{:?}", self.rec.learning_rate));
        put("rec.l2", format!("{:?}", self.rec.l2));
        put("rec.epochs", self.rec.epochs.to_string());
        put("rec.negatives", self.rec.negative_ratio.to_string());
        put(
            "graph.layers",
            self.graph
                .layer_dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("graph.out_dim", self.graph.out_dim.to_string());
        put("graph.buckets", self.graph.buckets.to_string());
        put("graph.dropout", format!("{:?}", self.graph.dropout));
        put("graph.lr", format!("{:?}", self.graph.learning_rate));
        put("graph.epochs", self.graph.epochs.to_string());
        put("cfe.state_dim", self.cfe.state_dim.to_string());
        put("cfe.candidate_size", self.cfe.candidate_size.to_string());
        put("cfe.episode_len", self.cfe.episode_len.to_string());
        put("cfe.episodes", self.cfe.episodes.to_string());
        put("cfe.gamma", format!("{:?}", self.cfe.gamma));
        put("cfe.c_max", format!("{:?}", self.cfe.c_max));
        put("cfe.lr", format!("{:?}", self.cfe.learning_rate));
        put("cfe.end_to_end", self.cfe.end_to_end.to_string());
        put("fairness.lambda", format!("{:?}", self.lambda));
        if let Some(a) = self.alpha {
            put("fairness.alpha", format!("{a:?}"));
        } else {
            put("fairness.alpha", "auto".to_string());
        }
        put("fairness.epsilon", format!("{:?}", self.epsilon));
        put("eval.top_k", self.cfe.top_k.to_string());
        put("eval.erasure_length", self.erasure_length.to_string());
        put("eval.budget", self.explanation_budget().to_string());
        m
    }

    /// Write the resolved configuration next to the run outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut out = String::new();
        for (k, v) in self.resolved_pairs() {
            out.push_str(&format!("{k}={v}\n"));
        }
        std::fs::write(dir.join("config.resolved.txt"), out)?;
        Ok(())
    }
}
