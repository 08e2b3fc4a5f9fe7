//! Sectioned `key = value` run configuration.
//!
//! ```ini
//! [model]
//! embed_dim = 64
//! [train]
//! steps_o = 2000
//! optimizer = adam
//! ```
//!
//! Every key is checked against the schema before any work starts.

use std::fmt::Write as _;
use std::path::PathBuf;

use ovattr::dataset::SyntheticSpec;
use ovattr::model::ModelConfig;
use ovattr::trainer::{OptimizerKind, TrainConfig};

/// A configuration or usage problem; the CLI exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub templates: Option<PathBuf>,
    pub antonyms: Option<PathBuf>,
    pub head_pct: f64,
    pub tail_pct: f64,
    pub split_override: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            templates: None,
            antonyms: None,
            head_pct: 2.0 / 3.0,
            tail_pct: 1.0 / 3.0,
            split_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub ar_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 8, ar_k: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub data: DataConfig,
    pub eval: EvalConfig,
    /// Whether the file set `train.seed`.
    pub seed_from_file: bool,
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

fn pairs(v: &str) -> Result<Vec<(String, String)>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|p| {
            p.split_once(':')
                .map(|(c, a)| (c.trim().to_string(), a.trim().to_string()))
                .ok_or_else(|| format!("`{p}` is not class:color"))
        })
        .collect()
}

fn range(v: &str) -> Result<(usize, usize), String> {
    let (a, b) = v.split_once('-').ok_or_else(|| format!("`{v}` is not lo-hi"))?;
    Ok((num(a.trim())?, num(b.trim())?))
}

impl RunConfig {
    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        match (section, key) {
            ("model", "image_size") => {
                m.image_size = num(v)?;
                s.image_size = m.image_size;
            }
            ("model", "patch_size") => m.patch_size = num(v)?,
            ("model", "embed_dim") => m.embed_dim = num(v)?,
            ("model", "num_layers") => m.num_layers = num(v)?,
            ("model", "num_heads") => m.num_heads = num(v)?,
            ("model", "text_vocab_size") => m.text_vocab_size = num(v)?,
            ("model", "text_max_len") => m.text_max_len = num(v)?,
            ("model", "mlp_hidden") => m.mlp_hidden = num(v)?,
            ("model", "proj_dim") => m.proj_dim = num(v)?,
            ("model", "logit_scale_init") => m.logit_scale_init = num(v)?,
            ("model", "init_std") => m.init_std = num(v)?,
            ("train", "steps_o") => t.steps_o = num(v)?,
            ("train", "steps_a") => t.steps_a = num(v)?,
            ("train", "steps_f") => t.steps_f = num(v)?,
            ("train", "lr_image") => t.lr_image = num(v)?,
            ("train", "lr_text") => t.lr_text = num(v)?,
            ("train", "batch_size") => t.batch_size = num(v)?,
            ("train", "seed") => {
                t.seed = num(v)?;
                self.seed_from_file = true;
            }
            ("train", "n_neg") => t.n_neg = num(v)?,
            ("train", "optimizer") => {
                t.optimizer = match v {
                    "sgd" => OptimizerKind::default(),
                    "adam" => OptimizerKind::adam(),
                    _ => return Err(format!("unknown optimizer `{v}` (sgd or adam)")),
                }
            }
            ("train", "momentum") => match &mut t.optimizer {
                OptimizerKind::Sgd { momentum } => *momentum = num(v)?,
                _ => return Err("momentum applies to optimizer = sgd only (set optimizer first)".into()),
            },
            ("train", "grad_clip") => t.grad_clip = if v == "none" { None } else { Some(num(v)?) },
            ("train", "focal_alpha") => t.loss.focal_alpha = num(v)?,
            ("train", "focal_gamma") => t.loss.focal_gamma = num(v)?,
            ("train", "match_l1") => t.loss.match_weights.l1 = num(v)?,
            ("train", "match_giou") => t.loss.match_weights.giou = num(v)?,
            ("train", "match_class") => t.loss.match_weights.class = num(v)?,
            ("data", "num_train") => s.num_train = num(v)?,
            ("data", "num_heldout") => s.num_heldout = num(v)?,
            ("data", "min_objects") => s.min_objects = num(v)?,
            ("data", "max_objects") => s.max_objects = num(v)?,
            ("data", "small_px") => s.small_px = range(v)?,
            ("data", "large_px") => s.large_px = range(v)?,
            ("data", "withheld") => s.withheld = pairs(v)?,
            ("data", "novel_fraction") => s.novel_fraction = num(v)?,
            ("data", "background_max") => s.background_max = num(v)?,
            ("data", "templates") => self.data.templates = Some(PathBuf::from(v)),
            ("data", "antonyms") => self.data.antonyms = Some(PathBuf::from(v)),
            ("data", "head_pct") => self.data.head_pct = num(v)?,
            ("data", "tail_pct") => self.data.tail_pct = num(v)?,
            ("data", "split_override") => self.data.split_override = Some(PathBuf::from(v)),
            ("eval", "k") => self.eval.k = num(v)?,
            ("eval", "ar_k") => self.eval.ar_k = num(v)?,
            _ => return Err(format!("unknown key `{key}` in section [{section}]")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let at = |msg: String| usage(format!("config line {}: {msg}", no + 1));
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["model", "train", "data", "eval"].contains(&name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at("expected `key = value`".into()))?;
            let sec = section.as_deref().ok_or_else(|| at("key outside of a section".into()))?;
            cfg.set(sec, k.trim(), v.trim()).map_err(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        if self.synth.image_size != self.model.image_size {
            return Err(usage("data image size must equal model.image_size"));
        }
        let d = &self.data;
        if !(0.0 < d.tail_pct && d.tail_pct < d.head_pct && d.head_pct < 1.0) {
            return Err(usage("data: need 0 < tail_pct < head_pct < 1"));
        }
        if self.eval.k == 0 || self.eval.ar_k == 0 {
            return Err(usage("eval: k and ar_k must be at least 1"));
        }
        Ok(())
    }

    /// Effective configuration in the same format, for the run directory.
    pub fn to_ini(&self) -> String {
        let (m, t, s) = (&self.model, &self.train, &self.synth);
        let mut o = String::new();
        let _ = writeln!(o, "[model]");
        for (k, v) in [
            ("image_size", m.image_size.to_string()),
            ("patch_size", m.patch_size.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("num_layers", m.num_layers.to_string()),
            ("num_heads", m.num_heads.to_string()),
            ("text_vocab_size", m.text_vocab_size.to_string()),
            ("text_max_len", m.text_max_len.to_string()),
            ("mlp_hidden", m.mlp_hidden.to_string()),
            ("proj_dim", m.proj_dim.to_string()),
            ("logit_scale_init", m.logit_scale_init.to_string()),
            ("init_std", m.init_std.to_string()),
        ] {
            let _ = writeln!(o, "{k} = {v}");
        }
        let _ = writeln!(o, "\n[train]");
        let (opt, momentum) = match t.optimizer {
            OptimizerKind::Sgd { momentum } => ("sgd", Some(momentum)),
            OptimizerKind::Adam { .. } => ("adam", None),
        };
        let mut rows = vec![
            ("steps_o", t.steps_o.to_string()),
            ("steps_a", t.steps_a.to_string()),
            ("steps_f", t.steps_f.to_string()),
            ("lr_image", t.lr_image.to_string()),
            ("lr_text", t.lr_text.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("n_neg", t.n_neg.to_string()),
            ("optimizer", opt.to_string()),
        ];
        if let Some(mo) = momentum {
            rows.push(("momentum", mo.to_string()));
        }
        rows.extend([
            ("grad_clip", t.grad_clip.map_or("none".to_string(), |c| c.to_string())),
            ("focal_alpha", t.loss.focal_alpha.to_string()),
            ("focal_gamma", t.loss.focal_gamma.to_string()),
            ("match_l1", t.loss.match_weights.l1.to_string()),
            ("match_giou", t.loss.match_weights.giou.to_string()),
            ("match_class", t.loss.match_weights.class.to_string()),
        ]);
        for (k, v) in rows {
            let _ = writeln!(o, "{k} = {v}");
        }
        let _ = writeln!(o, "\n[data]");
        let withheld: Vec<String> = s.withheld.iter().map(|(c, a)| format!("{c}:{a}")).collect();
        let mut rows = vec![
            ("num_train", s.num_train.to_string()),
            ("num_heldout", s.num_heldout.to_string()),
            ("min_objects", s.min_objects.to_string()),
            ("max_objects", s.max_objects.to_string()),
            ("small_px", format!("{}-{}", s.small_px.0, s.small_px.1)),
            ("large_px", format!("{}-{}", s.large_px.0, s.large_px.1)),
            ("withheld", withheld.join(",")),
            ("novel_fraction", s.novel_fraction.to_string()),
            ("background_max", s.background_max.to_string()),
            ("head_pct", self.data.head_pct.to_string()),
            ("tail_pct", self.data.tail_pct.to_string()),
        ];
        for (k, p) in [
            ("templates", &self.data.templates),
            ("antonyms", &self.data.antonyms),
            ("split_override", &self.data.split_override),
        ] {
            if let Some(p) = p {
                rows.push((k, p.display().to_string()));
            }
        }
        for (k, v) in rows {
            let _ = writeln!(o, "{k} = {v}");
        }
        let _ = writeln!(o, "\n[eval]\nk = {}\nar_k = {}", self.eval.k, self.eval.ar_k);
        o
    }
}
