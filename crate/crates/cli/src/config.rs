//! Flat `key = value` run configuration.
//!
//! Every key has a default, unknown keys are errors, and [`RunConfig::render`]
//! writes the fully resolved document back out so a run directory records
//! exactly what produced it. Keys whose default depends on the model variant
//! accept `auto`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use cpnet::cloud::ShapeKind;
use cpnet::data::DatasetSpec;
use cpnet::disentangle::Manner;
use cpnet::losses::{LossConfig, LossTerm};
use cpnet::model::{CpNetConfig, TaskVariant};
use cpnet::train::{AugmentConfig, TrainConfig};

/// `(key, default, description)` for every accepted key, in render order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("out_dir", "runs/default", "directory for checkpoints, metrics and the config echo"),
    ("seed", "0", "single source of randomness for data, init, shuffling, noise and probe splits"),
    ("data.index", "none", "index.csv written by `gen`; `none` synthesizes the dataset below"),
    ("data.kinds", "sphere,cube,torus", "shape kinds, one class per kind"),
    ("data.per_kind", "10", "clouds per kind"),
    ("data.n_points", "256", "points per cloud"),
    ("data.noise_std", "0", "Gaussian noise on generated coordinates"),
    ("data.random_rotation", "false", "rotate every cloud uniformly at random"),
    ("data.scale_jitter", "0", "per-axis scale drawn from [1 - s, 1 + s]"),
    ("epochs", "100", "training epochs"),
    ("batch_size", "4", "clouds per optimizer step"),
    ("checkpoint_every", "10", "epochs between checkpoints; the final epoch is always saved"),
    ("lr0", "0.001", "initial learning rate"),
    ("lr_decay", "0.7", "learning-rate factor per period"),
    ("lr_period", "20", "epochs per learning-rate step"),
    ("bn_momentum0", "0.9", "initial batch-norm momentum"),
    ("bn_decay", "0.5", "batch-norm momentum factor per period"),
    ("bn_period", "20", "epochs per momentum step"),
    ("bn_momentum_min", "0.01", "momentum floor"),
    ("beta1", "0.9", "Adam first-moment decay"),
    ("beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam denominator guard"),
    ("loss.terms", "auto", "preset name or comma list of cg,cl,cl2g,recon,normal; auto follows the variant"),
    ("loss.tau", "0.1", "contrastive temperature"),
    ("loss.normalize_logits", "true", "L2-normalize features before contrastive logits"),
    ("loss.symmetric_cl", "false", "average the point contrast over both directions"),
    ("augment.manner", "H", "perturbation manner A to I"),
    ("augment.std", "0.02", "perturbation noise standard deviation"),
    ("augment.clip", "none", "clamp each noise coordinate to [-clip, clip]"),
    ("augment.jitter_count", "none", "jitter exactly this many top-scored points instead"),
    ("augment.k_graph", "16", "neighbours of the scoring graph"),
    ("model.variant", "segmentation", "segmentation or classification"),
    ("model.channels", "auto", "channels per encoder level"),
    ("model.head_widths", "auto", "point-wise head width per level (segmentation)"),
    ("model.k_neighbors", "16", "neighbours per relation-shape convolution"),
    ("model.interp_k", "3", "neighbours for inverse-distance interpolation"),
    ("model.weight_net_hidden", "16", "hidden width of the relation weight net"),
    ("model.use_batch_norm", "true", "batch norm after every shared MLP"),
    ("model.bn_eps", "1e-5", "batch-norm variance guard"),
    ("model.absolute_relation", "true", "include absolute coordinates in the relation vector"),
    ("model.fold_grid_side", "auto", "side of the folding lattice; auto is ceil(sqrt(N))"),
    ("model.fold_hidden", "64", "hidden width of the folding head"),
    ("model.normal_head", "auto", "predict normals; auto is on for segmentation"),
    ("model.normal_hidden", "64", "hidden width of the normal head"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data_index: Option<PathBuf>,
    pub data: DatasetSpec,
    pub checkpoint_every: usize,
    pub train: TrainConfig,
}

#[derive(Debug, PartialEq)]
pub struct ConfigError(pub String);

impl Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse("").expect("defaults parse")
    }
}

struct Values(BTreeMap<&'static str, String>);

impl Values {
    fn raw(&self, key: &str) -> &str {
        &self.0[key]
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e| ConfigError(format!("{key} = {v}: {e}")))
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        if self.raw(key) == "none" || self.raw(key) == "auto" {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| ConfigError(format!("{key}: `{s}`: {e}"))))
            .collect()
    }
}

fn loss_terms(spec: &str, variant: TaskVariant) -> Result<LossConfig> {
    Ok(match spec {
        "auto" => match variant {
            TaskVariant::Segmentation => LossConfig::segmentation(),
            TaskVariant::Classification => LossConfig::classification(),
        },
        "segmentation" => LossConfig::segmentation(),
        "classification" => LossConfig::classification(),
        "classification_global" => LossConfig::classification_global(),
        "basic_only" => LossConfig::basic_only(),
        "all" => LossConfig::all(),
        list => {
            let terms = list
                .split(',')
                .map(|s| s.trim().parse::<LossTerm>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| ConfigError(format!("loss.terms: {e}")))?;
            LossConfig::with_terms(&terms)
        }
    })
}

impl RunConfig {
    /// Parses a document over the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut values: BTreeMap<&'static str, String> = KEYS.iter().map(|&(k, d, _)| (k, d.to_string())).collect();
        let mut seen = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {lineno}: expected `key = value`")))?;
            let (k, v) = (k.trim(), v.trim());
            let key = KEYS
                .iter()
                .map(|&(key, _, _)| key)
                .find(|&key| key == k)
                .ok_or_else(|| ConfigError(format!("line {lineno}: unknown key `{k}`")))?;
            if let Some(prev) = seen.insert(key, lineno) {
                return Err(ConfigError(format!("line {lineno}: `{k}` already set on line {prev}")));
            }
            if v.is_empty() {
                return Err(ConfigError(format!("line {lineno}: `{k}` has no value")));
            }
            values.insert(key, v.to_string());
        }
        Self::resolve(&Values(values))
    }

    fn resolve(v: &Values) -> Result<RunConfig> {
        let seed: u64 = v.get("seed")?;
        let data = DatasetSpec {
            kinds: v.list::<ShapeKind>("data.kinds")?,
            per_kind: v.get("data.per_kind")?,
            n_points: v.get("data.n_points")?,
            noise_std: v.get("data.noise_std")?,
            seed,
            random_rotation: v.get("data.random_rotation")?,
            scale_jitter: v.get("data.scale_jitter")?,
        };
        if data.kinds.is_empty() {
            return Err(ConfigError("data.kinds is empty".into()));
        }

        let variant: TaskVariant = v.get("model.variant")?;
        let n = data.n_points;
        let mut model = match variant {
            TaskVariant::Segmentation => CpNetConfig::segmentation(n),
            TaskVariant::Classification => CpNetConfig::classification(n),
        };
        if v.raw("model.channels") != "auto" {
            model.channels_per_level = v.list("model.channels")?;
            model.points_per_level = (0..model.channels_per_level.len()).map(|i| (n >> i).max(1)).collect();
            if variant == TaskVariant::Segmentation && v.raw("model.head_widths") == "auto" {
                let w = model.head_widths[0];
                model.head_widths = vec![w; model.channels_per_level.len()];
            }
        }
        if v.raw("model.head_widths") != "auto" {
            model.head_widths = v.list("model.head_widths")?;
        }
        model.k_neighbors = v.get("model.k_neighbors")?;
        model.interp_k = v.get("model.interp_k")?;
        model.weight_net_hidden = v.get("model.weight_net_hidden")?;
        model.use_batch_norm = v.get("model.use_batch_norm")?;
        model.bn_eps = v.get("model.bn_eps")?;
        model.absolute_relation = v.get("model.absolute_relation")?;
        model.fold_grid_side = v.opt("model.fold_grid_side")?;
        model.fold_hidden = v.get("model.fold_hidden")?;
        if let Some(on) = v.opt("model.normal_head")? {
            model.normal_head = on;
        }
        model.normal_hidden = v.get("model.normal_hidden")?;

        let mut loss = loss_terms(v.raw("loss.terms"), variant)?;
        loss.tau = v.get("loss.tau")?;
        loss.normalize_logits = v.get("loss.normalize_logits")?;
        loss.symmetric_cl = v.get("loss.symmetric_cl")?;

        let augment = AugmentConfig {
            manner: v.get::<Manner>("augment.manner")?,
            std: v.get("augment.std")?,
            clip: v.opt("augment.clip")?,
            jitter_count: v.opt("augment.jitter_count")?,
            k_graph: v.get("augment.k_graph")?,
        };

        let mut train = TrainConfig::new(model, loss);
        train.epochs = v.get("epochs")?;
        train.batch_size = v.get("batch_size")?;
        train.lr0 = v.get("lr0")?;
        train.lr_decay = v.get("lr_decay")?;
        train.lr_period = v.get("lr_period")?;
        train.bn_momentum0 = v.get("bn_momentum0")?;
        train.bn_decay = v.get("bn_decay")?;
        train.bn_period = v.get("bn_period")?;
        train.bn_momentum_min = v.get("bn_momentum_min")?;
        train.beta1 = v.get("beta1")?;
        train.beta2 = v.get("beta2")?;
        train.adam_eps = v.get("adam_eps")?;
        train.seed = seed;
        train.augment = augment;
        train.validate().map_err(|e| ConfigError(e.to_string()))?;

        let checkpoint_every: usize = v.get("checkpoint_every")?;
        if checkpoint_every == 0 {
            return Err(ConfigError("checkpoint_every must be at least 1".into()));
        }
        Ok(RunConfig {
            out_dir: PathBuf::from(v.raw("out_dir")),
            data_index: v.opt::<PathBuf>("data.index")?,
            data,
            checkpoint_every,
            train,
        })
    }

    /// The resolved document: every key, `auto` replaced by its value where
    /// it has one. Parsing the output gives back the same configuration.
    pub fn render(&self) -> String {
        fn join<T: Display>(xs: &[T]) -> String {
            xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
        }
        fn opt<T: Display>(x: Option<T>) -> String {
            x.map_or("none".into(), |v| v.to_string())
        }
        let t = &self.train;
        let m = &t.model;
        let terms: Vec<LossTerm> = t.loss.enabled.iter().copied().collect();
        let value = |key: &str| -> String {
            match key {
                "out_dir" => self.out_dir.display().to_string(),
                "seed" => t.seed.to_string(),
                "data.index" => opt(self.data_index.as_ref().map(|p| p.display())),
                "data.kinds" => join(&self.data.kinds.iter().map(|k| k.name()).collect::<Vec<_>>()),
                "data.per_kind" => self.data.per_kind.to_string(),
                "data.n_points" => self.data.n_points.to_string(),
                "data.noise_std" => self.data.noise_std.to_string(),
                "data.random_rotation" => self.data.random_rotation.to_string(),
                "data.scale_jitter" => self.data.scale_jitter.to_string(),
                "epochs" => t.epochs.to_string(),
                "batch_size" => t.batch_size.to_string(),
                "checkpoint_every" => self.checkpoint_every.to_string(),
                "lr0" => t.lr0.to_string(),
                "lr_decay" => t.lr_decay.to_string(),
                "lr_period" => t.lr_period.to_string(),
                "bn_momentum0" => t.bn_momentum0.to_string(),
                "bn_decay" => t.bn_decay.to_string(),
                "bn_period" => t.bn_period.to_string(),
                "bn_momentum_min" => t.bn_momentum_min.to_string(),
                "beta1" => t.beta1.to_string(),
                "beta2" => t.beta2.to_string(),
                "adam_eps" => t.adam_eps.to_string(),
                "loss.terms" => join(&terms),
                "loss.tau" => t.loss.tau.to_string(),
                "loss.normalize_logits" => t.loss.normalize_logits.to_string(),
                "loss.symmetric_cl" => t.loss.symmetric_cl.to_string(),
                "augment.manner" => t.augment.manner.to_string(),
                "augment.std" => t.augment.std.to_string(),
                "augment.clip" => opt(t.augment.clip),
                "augment.jitter_count" => opt(t.augment.jitter_count),
                "augment.k_graph" => t.augment.k_graph.to_string(),
                "model.variant" => match m.variant {
                    TaskVariant::Segmentation => "segmentation".into(),
                    TaskVariant::Classification => "classification".into(),
                },
                "model.channels" => join(&m.channels_per_level),
                "model.head_widths" if m.head_widths.is_empty() => "auto".into(),
                "model.head_widths" => join(&m.head_widths),
                "model.k_neighbors" => m.k_neighbors.to_string(),
                "model.interp_k" => m.interp_k.to_string(),
                "model.weight_net_hidden" => m.weight_net_hidden.to_string(),
                "model.use_batch_norm" => m.use_batch_norm.to_string(),
                "model.bn_eps" => m.bn_eps.to_string(),
                "model.absolute_relation" => m.absolute_relation.to_string(),
                "model.fold_grid_side" => m.fold_grid_side.map_or("auto".into(), |s| s.to_string()),
                "model.fold_hidden" => m.fold_hidden.to_string(),
                "model.normal_head" => m.normal_head.to_string(),
                "model.normal_hidden" => m.normal_hidden.to_string(),
                other => unreachable!("no renderer for {other}"),
            }
        };
        let mut out = String::new();
        for &(key, _, doc) in KEYS {
            out.push_str(&format!("# {doc}\n{key} = {}\n", value(key)));
        }
        out
    }

    /// Default document with every key commented, for `--print-default`.
    pub fn documented_defaults() -> String {
        KEYS.iter().map(|(k, d, doc)| format!("# {doc}\n{k} = {d}\n")).collect()
    }
}
