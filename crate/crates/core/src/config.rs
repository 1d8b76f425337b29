//! Run configuration: TOML file, dotted overrides, validation and hashing.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GathError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Both attention networks feed the decoder.
    Full,
    /// Ablation: the entity-specific network is disabled.
    JointOnly,
    /// The decoder scores the input entity table directly.
    DecoderOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::JointOnly => "joint_only",
            Mode::DecoderOnly => "decoder_only",
        }
    }

    pub fn uses_encoder(self) -> bool {
        self != Mode::DecoderOnly
    }

    pub fn entity_specific(self) -> bool {
        self == Mode::Full
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = GathError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "joint_only" => Ok(Mode::JointOnly),
            "decoder_only" => Ok(Mode::DecoderOnly),
            other => Err(GathError::Config(format!(
                "unknown mode `{other}` (expected full, joint_only or decoder_only)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Entity and relation width, equal at every layer.
    pub dim: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Dropout on each layer's input embeddings.
    pub input_dropout: f64,
    /// Dropout on the projected multi-head aggregate.
    pub output_dropout: f64,
    /// Batch normalization over entity rows of each layer's output.
    pub batch_norm: bool,
    /// Negative slope of the leaky rectifier in the attention feed-forward.
    pub attention_slope: f64,
    /// Nonlinearity of the residual update.
    pub activation: Activation,
    /// Standard deviation of the Gaussian initializer.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            dim: 200,
            d_k: 100,
            d_v: 100,
            input_dropout: 0.2,
            output_dropout: 0.2,
            batch_norm: false,
            attention_slope: 0.2,
            activation: Activation::Tanh,
            init_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// `[d_w, d_h]`; each of h, r and h⊙r becomes a d_w×d_h block.
    pub reshape: [usize; 2],
    pub channels: usize,
    pub kernel: [usize; 2],
    pub input_dropout: f64,
    pub feature_dropout: f64,
    pub hidden_dropout: f64,
    /// Batch normalization of the projected hidden vector.
    pub batch_norm: bool,
    pub activation: Activation,
    /// Applied to the convolution feature maps before flattening.
    pub conv_activation: Activation,
    /// Learnable per-entity offset added to every score.
    pub entity_bias: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            reshape: [10, 20],
            channels: 32,
            kernel: [3, 3],
            input_dropout: 0.2,
            feature_dropout: 0.2,
            hidden_dropout: 0.3,
            batch_norm: true,
            activation: Activation::Tanh,
            conv_activation: Activation::Identity,
            entity_bias: false,
        }
    }
}

impl DecoderConfig {
    /// Height and width of the stacked single-channel input image.
    pub fn image_dims(&self) -> (usize, usize) {
        (3 * self.reshape[0], self.reshape[1])
    }

    /// Feature map height and width after the valid convolution.
    pub fn feature_dims(&self) -> (usize, usize) {
        let (h, w) = self.image_dims();
        (h + 1 - self.kernel[0], w + 1 - self.kernel[1])
    }

    pub fn flat_features(&self) -> usize {
        let (m, n) = self.feature_dims();
        self.channels * m * n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr0: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub label_smoothing: f64,
    /// Validation interval in epochs; 0 validates only after the last epoch.
    pub valid_every: usize,
    /// Stop after this many validations without MRR improvement; 0 disables.
    pub patience: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            lr0: 0.01,
            lr_decay: 0.985,
            batch_size: 128,
            epochs: 100,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 42,
            label_smoothing: 0.0,
            valid_every: 0,
            patience: 0,
            eval_batch_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub device: String,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: PathBuf::from("runs/gath"),
            device: "cpu".into(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// The parts of a configuration that determine parameter shapes and the
/// forward computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub mode: Mode,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| GathError::Config(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| GathError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if any), applies `key=value` overrides, then validates.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        Self::load_over(&Self::default(), path, overrides)
    }

    /// Like [`RunConfig::load`], starting from `base` instead of the defaults.
    pub fn load_over(base: &Self, path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = base.to_toml().parse().expect("serialized config parses");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| GathError::io(p, e))?;
            let file = text
                .parse::<toml::Table>()
                .map_err(|e| GathError::Config(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            mode: self.train.mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GathError::Config(msg));
        if self.device != "cpu" {
            return bad(format!("unsupported device `{}` (only cpu)", self.device));
        }
        let e = &self.encoder;
        if e.layers == 0 || e.heads == 0 {
            return bad("encoder.layers and encoder.heads must be at least 1".into());
        }
        if e.dim == 0 || e.d_k == 0 || e.d_v == 0 {
            return bad(format!(
                "encoder dimensions must be positive (dim={}, d_k={}, d_v={})",
                e.dim, e.d_k, e.d_v
            ));
        }
        for (name, p) in [
            ("encoder.input_dropout", e.input_dropout),
            ("encoder.output_dropout", e.output_dropout),
            ("decoder.input_dropout", self.decoder.input_dropout),
            ("decoder.feature_dropout", self.decoder.feature_dropout),
            ("decoder.hidden_dropout", self.decoder.hidden_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} is outside [0, 1)"));
            }
        }
        if !(e.init_std > 0.0 && e.init_std.is_finite()) {
            return bad(format!("encoder.init_std = {} must be positive", e.init_std));
        }
        if !e.attention_slope.is_finite() {
            return bad("encoder.attention_slope must be finite".into());
        }
        let d = &self.decoder;
        let [dw, dh] = d.reshape;
        if dw * dh != e.dim {
            return bad(format!(
                "decoder.reshape {dw}x{dh} does not cover encoder.dim {}",
                e.dim
            ));
        }
        let (ih, iw) = d.image_dims();
        if d.channels == 0 || d.kernel[0] == 0 || d.kernel[1] == 0 || d.kernel[0] > ih || d.kernel[1] > iw {
            return bad(format!(
                "decoder kernel {:?} with {} channels does not fit the {ih}x{iw} input",
                d.kernel, d.channels
            ));
        }
        let t = &self.train;
        if !(t.lr0 > 0.0 && t.lr0.is_finite()) {
            return bad(format!("train.lr0 = {} must be positive", t.lr0));
        }
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            return bad(format!("train.lr_decay = {} must lie in (0, 1]", t.lr_decay));
        }
        if t.batch_size == 0 || t.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.eps <= 0.0 {
            return bad("optimizer constants need 0 <= beta < 1 and eps > 0".into());
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return bad(format!("train.weight_decay = {} must be non-negative", t.weight_decay));
        }
        if !(0.0..1.0).contains(&t.label_smoothing) {
            return bad(format!(
                "train.label_smoothing = {} is outside [0, 1)",
                t.label_smoothing
            ));
        }
        Ok(())
    }
}

impl ModelConfig {
    /// Hex SHA-256 of the model configuration and graph sizes.
    pub fn hash(&self, num_entities: usize, num_relations: usize) -> String {
        let json = serde_json::json!({
            "model": self,
            "num_entities": num_entities,
            "num_relations": num_relations,
        });
        let digest = Sha256::digest(json.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sets a dotted key such as `encoder.layers` in `table`. The value is read
/// as a TOML literal, falling back to a plain string.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(GathError::Config(format!("malformed key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| GathError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), parsed);
    Ok(())
}

fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| GathError::Config(format!("expected key=value, got `{s}`")))?;
    Ok((k.trim().to_owned(), v.trim().to_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        assert_eq!(RunConfig::default().decoder.feature_dims(), (28, 18));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[encoder]\nlayer = 3\n").unwrap_err();
        assert!(matches!(err, GathError::Config(_)), "{err}");
        assert!(RunConfig::from_toml_str("bogus = 1\n").is_err());
    }

    #[test]
    fn overrides_reach_nested_tables() {
        let cfg = RunConfig::load(
            None,
            &[
                ("encoder.layers".into(), "3".into()),
                ("train.mode".into(), "joint_only".into()),
                ("out".into(), "/tmp/x".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.encoder.layers, 3);
        assert_eq!(cfg.train.mode, Mode::JointOnly);
        assert_eq!(cfg.out, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let err = RunConfig::load(None, &[("encoder.dim".into(), "0".into())]).unwrap_err();
        assert!(err.to_string().contains("positive"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn reshape_must_cover_dim() {
        assert!(RunConfig::load(None, &[("decoder.reshape".into(), "[10, 10]".into())]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig {
            dataset: Some("data/x".into()),
            ..RunConfig::default()
        };
        cfg.train.mode = Mode::DecoderOnly;
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn hash_depends_on_shapes_not_schedule() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs = 3;
        assert_eq!(a.model().hash(10, 4), b.model().hash(10, 4));
        assert_ne!(a.model().hash(10, 4), a.model().hash(11, 4));
        b.encoder.layers = 1;
        assert_ne!(a.model().hash(10, 4), b.model().hash(10, 4));
    }
}
