use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Settings shared by the two token-memory encoders.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtmSettings {
    /// Memory slots per group (G). The vanilla encoder keeps `tokens * G`
    /// slots in one undivided memory.
    pub memory_per_group: usize,
    /// Tokens read per step (r).
    pub read: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Add the frame-index encoding to input tokens before each read.
    pub timestamp: bool,
}

impl TtmSettings {
    pub fn desk(dim: usize, timestamp: bool) -> Self {
        let g = 2;
        Self {
            memory_per_group: g,
            read: g + 1,
            layers: 1,
            heads: 2,
            ffn_hidden: 2 * dim,
            timestamp,
        }
    }
}

/// Which encoder to build, with its variant-specific hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum Variant {
    MeanPool,
    SumPool,
    FixedWindowPool {
        spatial_out: usize,
    },
    PerFramePool {
        per_frame: usize,
    },
    TransformerLastM {
        layers: usize,
        heads: usize,
        ffn_hidden: usize,
    },
    TokenlearnerPool {
        #[serde(default = "default_true")]
        timestamp: bool,
    },
    PerceiverPool {
        #[serde(default = "default_true")]
        timestamp: bool,
    },
    VanillaTtm(TtmSettings),
    GroupedTtm(TtmSettings),
}

fn default_true() -> bool {
    true
}

pub const VARIANT_TAGS: [&str; 9] = [
    "mean_pool",
    "sum_pool",
    "fixed_window_pool",
    "per_frame_pool",
    "transformer_last_m",
    "tokenlearner_pool",
    "perceiver_pool",
    "vanilla_ttm",
    "grouped_ttm",
];

impl Variant {
    pub fn tag(&self) -> &'static str {
        match self {
            Variant::MeanPool => "mean_pool",
            Variant::SumPool => "sum_pool",
            Variant::FixedWindowPool { .. } => "fixed_window_pool",
            Variant::PerFramePool { .. } => "per_frame_pool",
            Variant::TransformerLastM { .. } => "transformer_last_m",
            Variant::TokenlearnerPool { .. } => "tokenlearner_pool",
            Variant::PerceiverPool { .. } => "perceiver_pool",
            Variant::VanillaTtm(_) => "vanilla_ttm",
            Variant::GroupedTtm(_) => "grouped_ttm",
        }
    }

    pub fn is_learnable(&self) -> bool {
        !matches!(
            self,
            Variant::MeanPool | Variant::SumPool | Variant::FixedWindowPool { .. }
        )
    }
}

/// Full description of one encoder: input grid dims, token budget, variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    /// Output token count M.
    pub budget: usize,
    #[serde(flatten)]
    pub variant: Variant,
}

impl EncoderConfig {
    /// Builds a config for `tag` with default hyperparameters.
    ///
    /// Variants whose output count is fixed by the grid derive it: pooling
    /// over time always yields `tokens` outputs, and the windowed and
    /// per-frame poolers spend `budget / frames` tokens on each frame.
    ///
    /// The attentional poolers and the grouped memory encoder add the
    /// frame-index encoding by default; the vanilla memory encoder does not.
    /// A `_ts` or `_nots` suffix overrides the default.
    pub fn for_tag(tag: &str, frames: usize, tokens: usize, dim: usize, budget: usize) -> Result<Self> {
        let (base, ts) = if let Some(b) = tag.strip_suffix("_nots") {
            (b, Some(false))
        } else if let Some(b) = tag.strip_suffix("_ts") {
            (b, Some(true))
        } else {
            (tag, None)
        };
        let ts_or = |default: bool| ts.unwrap_or(default);
        let per_frame = budget / frames.max(1);
        let (variant, budget) = match base {
            "mean_pool" => (Variant::MeanPool, tokens),
            "sum_pool" => (Variant::SumPool, tokens),
            "fixed_window_pool" => (Variant::FixedWindowPool { spatial_out: per_frame }, budget),
            "per_frame_pool" => (Variant::PerFramePool { per_frame }, budget),
            "transformer_last_m" => (
                Variant::TransformerLastM {
                    layers: 2,
                    heads: 4,
                    ffn_hidden: 4 * dim,
                },
                budget,
            ),
            "tokenlearner_pool" => (Variant::TokenlearnerPool { timestamp: ts_or(true) }, budget),
            "perceiver_pool" => (Variant::PerceiverPool { timestamp: ts_or(true) }, budget),
            "vanilla_ttm" => (Variant::VanillaTtm(TtmSettings::desk(dim, ts_or(false))), budget),
            "grouped_ttm" => (Variant::GroupedTtm(TtmSettings::desk(dim, ts_or(true))), budget),
            other => return Err(Error::config(format!("unknown encoder variant `{other}`"))),
        };
        let cfg = Self {
            frames,
            tokens,
            dim,
            budget,
            variant,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full-scale grid (8 frames of 128 tokens, 1152 channels) with the
    /// grouped memory of 4 slots per token and a 4-layer processor.
    pub fn full_scale(tag: &str, budget: usize) -> Result<Self> {
        let mut cfg = Self::for_tag(tag, 8, 128, 1152, budget)?;
        match &mut cfg.variant {
            Variant::VanillaTtm(s) | Variant::GroupedTtm(s) => {
                s.memory_per_group = 4;
                s.read = 5;
                s.layers = 4;
                s.heads = 8;
                s.ffn_hidden = 4 * 1152;
            }
            Variant::TransformerLastM { heads, .. } => *heads = 8,
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn tag(&self) -> &'static str {
        self.variant.tag()
    }

    /// Display name that distinguishes timestamp settings.
    pub fn label(&self) -> String {
        match &self.variant {
            Variant::VanillaTtm(TtmSettings { timestamp: true, .. }) => format!("{}_ts", self.tag()),
            Variant::TokenlearnerPool { timestamp: false }
            | Variant::PerceiverPool { timestamp: false }
            | Variant::GroupedTtm(TtmSettings {
                timestamp: false, ..
            }) => format!("{}_nots", self.tag()),
            _ => self.tag().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (t, n, d, m) = (self.frames, self.tokens, self.dim, self.budget);
        if t == 0 || n == 0 || d == 0 || m == 0 {
            return Err(Error::config(format!(
                "frames, tokens, dim and budget must be positive (got T={t}, N={n}, D={d}, M={m})"
            )));
        }
        let fail = |msg: String| Err(Error::config(format!("{}: {msg}", self.tag())));
        match &self.variant {
            Variant::MeanPool | Variant::SumPool if m != n => {
                fail(format!("temporal pooling yields N={n} tokens, budget is {m}"))
            }
            Variant::FixedWindowPool { spatial_out } => {
                if *spatial_out == 0 || n % spatial_out != 0 {
                    fail(format!("{n} tokens per frame not divisible into {spatial_out} windows"))
                } else if spatial_out * t != m {
                    fail(format!("{spatial_out} windows x {t} frames != budget {m}"))
                } else {
                    Ok(())
                }
            }
            Variant::PerFramePool { per_frame } if *per_frame == 0 || per_frame * t != m => {
                fail(format!("{per_frame} per frame x {t} frames != budget {m}"))
            }
            Variant::TransformerLastM {
                layers,
                heads,
                ffn_hidden,
            } => {
                if m > n * t {
                    fail(format!("budget {m} exceeds sequence length {}", n * t))
                } else if *layers == 0 || *ffn_hidden == 0 {
                    fail("need at least one layer and a non-empty FFN".into())
                } else if *heads == 0 || d % heads != 0 {
                    fail(format!("dim {d} not divisible by {heads} heads"))
                } else {
                    Ok(())
                }
            }
            Variant::VanillaTtm(s) | Variant::GroupedTtm(s) => {
                if s.memory_per_group == 0 || s.read == 0 || s.layers == 0 || s.ffn_hidden == 0 {
                    fail("memory size, read size, depth and FFN width must be positive".into())
                } else if s.heads == 0 || d % s.heads != 0 {
                    fail(format!("dim {d} not divisible by {} heads", s.heads))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}
