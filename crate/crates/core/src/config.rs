//! Model hyperparameters and their `key=value` text form.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    Transformer,
    Mamba,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerKind {
    Linear,
    Mlp,
}

/// Which positions of a training window carry a next-item target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    All,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    _ => Err(format!(
                        "expected one of {}, got '{s}'",
                        [$($text),+].join("|")
                    )),
                }
            }
        }
    };
}

keyword_enum!(Backbone { Transformer => "transformer", Mamba => "mamba" });
keyword_enum!(InnerKind { Linear => "linear", Mlp => "mlp" });
keyword_enum!(TargetMode { All => "all", Last => "last" });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of real items; the embedding table has one extra padding row.
    pub n_items: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub backbone: Backbone,
    pub inner: InnerKind,
    /// Hidden width of the MLP inner model.
    pub inner_hidden: usize,
    pub rope_mu: f64,
    pub eta_inner: f64,
    pub adapt_at_eval: bool,
    pub dropout: f64,
    pub max_context: usize,
    pub eta_outer: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub tie_prediction: bool,
    pub targets: TargetMode,
    pub conv_kernel: usize,
    pub ffn_mult: usize,
    pub ln_eps: f64,
    pub init_std: f64,
    pub check_finite: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_items: 100,
            d_model: 64,
            blocks: 1,
            backbone: Backbone::Transformer,
            inner: InnerKind::Mlp,
            inner_hidden: 256,
            rope_mu: 1000.0,
            eta_inner: 0.1,
            adapt_at_eval: true,
            dropout: 0.2,
            max_context: 100,
            eta_outer: 1e-3,
            batch_size: 64,
            epochs: 20,
            seed: 42,
            tie_prediction: false,
            targets: TargetMode::All,
            conv_kernel: 4,
            ffn_mult: 4,
            ln_eps: 1e-5,
            init_std: 0.02,
            check_finite: true,
        }
    }
}

/// Keys understood by [`ModelConfig::set`], in canonical order.
pub const MODEL_KEYS: &[&str] = &[
    "n_items",
    "d_model",
    "blocks",
    "backbone",
    "inner",
    "inner_hidden",
    "rope_mu",
    "eta_inner",
    "adapt_at_eval",
    "dropout",
    "max_context",
    "eta_outer",
    "batch_size",
    "epochs",
    "seed",
    "tie_prediction",
    "targets",
    "conv_kernel",
    "ffn_mult",
    "ln_eps",
    "init_std",
    "check_finite",
];

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| format!("{key}: cannot parse '{value}': {e}"))
}

impl ModelConfig {
    /// Sets one field from its text form. `Ok(false)` means the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "n_items" => self.n_items = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "blocks" => self.blocks = parse(key, value)?,
            "backbone" => self.backbone = parse(key, value)?,
            "inner" => self.inner = parse(key, value)?,
            "inner_hidden" => self.inner_hidden = parse(key, value)?,
            "rope_mu" => self.rope_mu = parse(key, value)?,
            "eta_inner" => self.eta_inner = parse(key, value)?,
            "adapt_at_eval" => self.adapt_at_eval = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "max_context" => self.max_context = parse(key, value)?,
            "eta_outer" => self.eta_outer = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "tie_prediction" => self.tie_prediction = parse(key, value)?,
            "targets" => self.targets = parse(key, value)?,
            "conv_kernel" => self.conv_kernel = parse(key, value)?,
            "ffn_mult" => self.ffn_mult = parse(key, value)?,
            "ln_eps" => self.ln_eps = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "check_finite" => self.check_finite = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_items", self.n_items.to_string()),
            ("d_model", self.d_model.to_string()),
            ("blocks", self.blocks.to_string()),
            ("backbone", self.backbone.to_string()),
            ("inner", self.inner.to_string()),
            ("inner_hidden", self.inner_hidden.to_string()),
            ("rope_mu", self.rope_mu.to_string()),
            ("eta_inner", self.eta_inner.to_string()),
            ("adapt_at_eval", self.adapt_at_eval.to_string()),
            ("dropout", self.dropout.to_string()),
            ("max_context", self.max_context.to_string()),
            ("eta_outer", self.eta_outer.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("tie_prediction", self.tie_prediction.to_string()),
            ("targets", self.targets.to_string()),
            ("conv_kernel", self.conv_kernel.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("init_std", self.init_std.to_string()),
            ("check_finite", self.check_finite.to_string()),
        ]
    }

    /// Canonical `key=value` lines.
    pub fn to_text(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Hex SHA-256 of [`ModelConfig::to_text`].
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Collects every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut positive = |name: &str, v: usize| {
            if v == 0 {
                out.push(format!("{name}: must be positive"));
            }
        };
        positive("n_items", self.n_items);
        positive("d_model", self.d_model);
        positive("blocks", self.blocks);
        positive("inner_hidden", self.inner_hidden);
        positive("max_context", self.max_context);
        positive("batch_size", self.batch_size);
        positive("conv_kernel", self.conv_kernel);
        positive("ffn_mult", self.ffn_mult);
        if !self.d_model.is_multiple_of(2) {
            out.push(format!("d_model: must be even, got {}", self.d_model));
        }
        if !(self.rope_mu.is_finite() && self.rope_mu > 0.0) {
            out.push("rope_mu: must be a positive number".into());
        }
        if !(self.eta_inner.is_finite() && self.eta_inner >= 0.0) {
            out.push("eta_inner: must be >= 0".into());
        }
        if !(self.eta_outer.is_finite() && self.eta_outer >= 0.0) {
            out.push("eta_outer: must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push("dropout: must lie in [0, 1)".into());
        }
        if !(self.ln_eps.is_finite() && self.ln_eps > 0.0) {
            out.push("ln_eps: must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            out.push("init_std: must be >= 0".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Inner learning rate in effect for `mode`.
    pub fn effective_eta(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Train => self.eta_inner,
            Mode::Eval if self.adapt_at_eval => self.eta_inner,
            Mode::Eval => 0.0,
        }
    }
}

/// Parses `key=value` lines with `#` comments into pairs, keeping line numbers.
pub fn parse_kv_lines(text: &str) -> std::result::Result<Vec<(usize, String, String)>, Vec<String>> {
    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => pairs.push((i + 1, k.trim().to_string(), v.trim().to_string())),
            None => errors.push(format!("line {}: expected key=value, got '{line}'", i + 1)),
        }
    }
    if errors.is_empty() {
        Ok(pairs)
    } else {
        Err(errors)
    }
}

impl ModelConfig {
    /// Builds a config from `key=value` text, rejecting unknown keys.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_kv_lines(text).map_err(Error::Config)?;
        let mut cfg = ModelConfig::default();
        let mut errors = Vec::new();
        for (line, k, v) in pairs {
            match cfg.set(&k, &v) {
                Ok(true) => {}
                Ok(false) => errors.push(format!("line {line}: unknown key '{k}'")),
                Err(e) => errors.push(format!("line {line}: {e}")),
            }
        }
        errors.extend(cfg.problems());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }
}
