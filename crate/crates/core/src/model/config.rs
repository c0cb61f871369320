//! Model configuration files.
//!
//! Flat `key = value` text, one entry per line, `#` starts a comment. An
//! optional first directive `inherit = <preset>` starts from a bundled preset;
//! later keys override it. Keys not mentioned anywhere keep their defaults.
//!
//! | key | values |
//! |-----|--------|
//! | `name` | string |
//! | `embedding_dim` | positive integer |
//! | `tpu` | `true`/`false`: trainable PAD and UNK rows |
//! | `hidden` | positive integer |
//! | `kernel_width` | odd integer |
//! | `encoder_layers` | positive integer |
//! | `share_input_encoders` | bool |
//! | `model_encoder` | bool |
//! | `deep` | bool: two extra model-encoder blocks |
//! | `attention_kind` | `basic` or `bidirectional` |
//! | `self_attention_heads` | integer, 0 disables |
//! | `self_attention_head_dim` | positive integer |
//! | `self_attention_bypass` | `none`, `residual` or `dense` |
//! | `self_attention_position` | `end` or a 1-based conv layer number |
//! | `output` | `baseline_fc` or `wide_conv` |
//! | `output_kernel` | positive integer |
//! | `output_proj_dim` | positive integer |
//! | `decode` | `naive` or `constrained` |
//! | `max_span_len` | positive integer or `off` |
//! | `dropout` | probability in `[0, 1)` |
//! | `dropout_placement` | `before_conv` or `block_output` |
//! | `l2` | non-negative real |
//! | `layer_norm` | bool |

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{AttentionPosition, AttentionSpec, Bypass};
use crate::span::{DEFAULT_MAX_SPAN_LEN, DEFAULT_OUTPUT_KERNEL, DEFAULT_OUTPUT_PROJ_DIM};

macro_rules! keyword_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name {
            $($variant),+
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($name::$variant => $text),+
                })
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " {:?} (expected one of: {})"),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(
    /// Context–question interaction.
    AttentionKind { Basic => "basic", Bidirectional => "bidirectional" }
);
keyword_enum!(OutputKind { BaselineFc => "baseline_fc", WideConv => "wide_conv" });
keyword_enum!(DecodeKind { Naive => "naive", Constrained => "constrained" });
keyword_enum!(DropoutPlacement { BeforeConv => "before_conv", BlockOutput => "block_output" });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub embedding_dim: usize,
    pub tpu: bool,
    pub hidden: usize,
    pub kernel_width: usize,
    pub encoder_layers: usize,
    pub share_input_encoders: bool,
    pub model_encoder: bool,
    pub deep: bool,
    pub attention_kind: AttentionKind,
    pub self_attention_heads: usize,
    pub self_attention_head_dim: usize,
    pub self_attention_bypass: Bypass,
    pub self_attention_position: AttentionPosition,
    pub output: OutputKind,
    pub output_kernel: usize,
    pub output_proj_dim: usize,
    pub decode: DecodeKind,
    pub max_span_len: Option<usize>,
    pub dropout: f64,
    pub dropout_placement: DropoutPlacement,
    pub l2: f64,
    pub layer_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            name: "custom".into(),
            embedding_dim: 300,
            tpu: false,
            hidden: 200,
            kernel_width: 5,
            encoder_layers: 4,
            share_input_encoders: false,
            model_encoder: false,
            deep: false,
            attention_kind: AttentionKind::Basic,
            self_attention_heads: 0,
            self_attention_head_dim: 32,
            self_attention_bypass: Bypass::Dense,
            self_attention_position: AttentionPosition::End,
            output: OutputKind::BaselineFc,
            output_kernel: DEFAULT_OUTPUT_KERNEL,
            output_proj_dim: DEFAULT_OUTPUT_PROJ_DIM,
            decode: DecodeKind::Naive,
            max_span_len: Some(DEFAULT_MAX_SPAN_LEN),
            dropout: 0.0,
            dropout_placement: DropoutPlacement::BeforeConv,
            l2: 0.0,
            layer_norm: false,
        }
    }
}

const PRESETS: &[(&str, &str)] = &[
    ("simpconv", include_str!("../../presets/simpconv.cfg")),
    ("triconv", include_str!("../../presets/triconv.cfg")),
    ("triconv_attn", include_str!("../../presets/triconv_attn.cfg")),
    ("triconv_reg", include_str!("../../presets/triconv_reg.cfg")),
    ("windowconv100", include_str!("../../presets/windowconv100.cfg")),
    ("attn2", include_str!("../../presets/attn2.cfg")),
    ("shareconv", include_str!("../../presets/shareconv.cfg")),
    ("windowconv300", include_str!("../../presets/windowconv300.cfg")),
    ("narrowconv", include_str!("../../presets/narrowconv.cfg")),
    ("combconv100", include_str!("../../presets/combconv100.cfg")),
    ("combconv50", include_str!("../../presets/combconv50.cfg")),
    ("dropoutconv", include_str!("../../presets/dropoutconv.cfg")),
    ("maybeconv", include_str!("../../presets/maybeconv.cfg")),
    ("deepconv", include_str!("../../presets/deepconv.cfg")),
    ("crossconv", include_str!("../../presets/crossconv.cfg")),
    ("attnconv", include_str!("../../presets/attnconv.cfg")),
];

/// Names of the bundled presets, in table order.
pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

/// Raw text of a bundled preset file.
pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

const MAX_INHERIT_DEPTH: usize = 16;

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Self::preset_at_depth(name, 0)
    }

    fn preset_at_depth(name: &str, depth: usize) -> Result<Self> {
        let source = preset_source(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown preset {name:?} (known: {})",
                preset_names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        Self::parse_at_depth(source, &format!("preset {name}"), depth)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        Self::parse_at_depth(text, source_name, 0)
    }

    fn parse_at_depth(text: &str, source_name: &str, depth: usize) -> Result<Self> {
        if depth > MAX_INHERIT_DEPTH {
            return Err(Error::parse(source_name, None, "inheritance chain too deep"));
        }
        let mut config: Option<ModelConfig> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::parse(source_name, Some(i + 1), format!("expected `key = value`, got {line:?}")))?;
            let at = |e: Error| Error::parse(source_name, Some(i + 1), e.to_string());
            if key == "inherit" {
                if config.is_some() {
                    return Err(Error::parse(source_name, Some(i + 1), "`inherit` must come before other keys"));
                }
                config = Some(Self::preset_at_depth(value, depth + 1).map_err(at)?);
                continue;
            }
            config.get_or_insert_with(ModelConfig::default).set(key, value).map_err(at)?;
        }
        let config = config.unwrap_or_default();
        config.validate().map_err(|e| Error::parse(source_name, None, e.to_string()))?;
        Ok(config)
    }

    /// Sets one key from its text form (config files and CLI overrides).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
            }
        }
        match key {
            "name" => self.name = value.to_string(),
            "embedding_dim" => self.embedding_dim = num(key, value)?,
            "tpu" => self.tpu = flag(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "kernel_width" => self.kernel_width = num(key, value)?,
            "encoder_layers" => self.encoder_layers = num(key, value)?,
            "share_input_encoders" => self.share_input_encoders = flag(key, value)?,
            "model_encoder" => self.model_encoder = flag(key, value)?,
            "deep" => self.deep = flag(key, value)?,
            "attention_kind" => self.attention_kind = value.parse()?,
            "self_attention_heads" => self.self_attention_heads = num(key, value)?,
            "self_attention_head_dim" => self.self_attention_head_dim = num(key, value)?,
            "self_attention_bypass" => self.self_attention_bypass = value.parse()?,
            "self_attention_position" => self.self_attention_position = value.parse()?,
            "output" => self.output = value.parse()?,
            "output_kernel" => self.output_kernel = num(key, value)?,
            "output_proj_dim" => self.output_proj_dim = num(key, value)?,
            "decode" => self.decode = value.parse()?,
            "max_span_len" => {
                self.max_span_len = match value {
                    "off" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "dropout" => self.dropout = num(key, value)?,
            "dropout_placement" => self.dropout_placement = value.parse()?,
            "l2" => self.l2 = num(key, value)?,
            "layer_norm" => self.layer_norm = flag(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Rejects values and combinations that cannot be built.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_dim", self.embedding_dim),
            ("hidden", self.hidden),
            ("encoder_layers", self.encoder_layers),
            ("output_kernel", self.output_kernel),
            ("output_proj_dim", self.output_proj_dim),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.kernel_width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_width must be odd, got {}",
                self.kernel_width
            )));
        }
        if self.max_span_len == Some(0) {
            return Err(Error::Config("max_span_len must be positive or off".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("l2 {} must be a non-negative number", self.l2)));
        }
        if self.deep && !self.model_encoder {
            return Err(Error::Config("deep = true needs model_encoder = true".into()));
        }
        if let Some(a) = self.attention_spec() {
            if a.head_dim == 0 {
                return Err(Error::Config("self_attention_head_dim must be positive".into()));
            }
            a.bypass
                .out_dim(a.heads * a.head_dim, self.hidden)
                .map_err(|e| Error::Config(format!("self_attention_bypass: {e}")))?;
            if let AttentionPosition::AfterLayer(n) = a.position {
                if n > self.encoder_layers {
                    return Err(Error::Config(format!(
                        "self_attention_position {n} exceeds encoder_layers {}",
                        self.encoder_layers
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn attention_spec(&self) -> Option<AttentionSpec> {
        (self.self_attention_heads > 0).then_some(AttentionSpec {
            heads: self.self_attention_heads,
            head_dim: self.self_attention_head_dim,
            bypass: self.self_attention_bypass,
            position: self.self_attention_position,
        })
    }

    /// Number of model-encoder blocks after attention.
    pub fn num_model_encoders(&self) -> usize {
        match (self.model_encoder, self.deep) {
            (false, _) => 0,
            (true, false) => 1,
            (true, true) => 3,
        }
    }

    pub fn max_span_len_text(&self) -> String {
        self.max_span_len.map_or_else(|| "off".to_string(), |n| n.to_string())
    }

    /// Complete config text; parsing it yields `self` again.
    pub fn to_config_string(&self) -> String {
        let entries: [(&str, String); 23] = [
            ("name", self.name.clone()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("tpu", self.tpu.to_string()),
            ("hidden", self.hidden.to_string()),
            ("kernel_width", self.kernel_width.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("share_input_encoders", self.share_input_encoders.to_string()),
            ("model_encoder", self.model_encoder.to_string()),
            ("deep", self.deep.to_string()),
            ("attention_kind", self.attention_kind.to_string()),
            ("self_attention_heads", self.self_attention_heads.to_string()),
            ("self_attention_head_dim", self.self_attention_head_dim.to_string()),
            ("self_attention_bypass", self.self_attention_bypass.to_string()),
            ("self_attention_position", self.self_attention_position.to_string()),
            ("output", self.output.to_string()),
            ("output_kernel", self.output_kernel.to_string()),
            ("output_proj_dim", self.output_proj_dim.to_string()),
            ("decode", self.decode.to_string()),
            ("max_span_len", self.max_span_len_text()),
            ("dropout", format!("{:?}", self.dropout)),
            ("dropout_placement", self.dropout_placement.to_string()),
            ("l2", format!("{:?}", self.l2)),
            ("layer_norm", self.layer_norm.to_string()),
        ];
        entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
