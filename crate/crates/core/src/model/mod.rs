//! Two-tower detector.
//!
//! The image tower turns each patch into one proposal embedding. A linear
//! text head projects every proposal into the joint space and a box head
//! regresses one normalized box per proposal. The text tower embeds each
//! query; classification logits are scaled cosine similarities between
//! proposals and the image's own queries.

mod config;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{logit_scale_max, ModelConfig};
pub use params::{Bound, ParamGroup, ParamStore};

use crate::geometry::logit;
use crate::image::Image;
use crate::tensor::{Array, Tensor, TensorError};
use params::trunc_normal;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("image is {got}×{got}×{channels}, model expects {want}×{want}×{want_channels}")]
    ImageSize {
        got: usize,
        channels: usize,
        want: usize,
        want_channels: usize,
    },
    #[error("text query {0} is empty")]
    EmptyText(usize),
    #[error("text query {index} has {len} tokens, limit is {max}")]
    TextTooLong { index: usize, len: usize, max: usize },
    #[error("token id {0} outside the vocabulary")]
    TokenOutOfRange(usize),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Per-image predictions.
#[derive(Debug, Clone)]
pub struct ModelOutput<'g> {
    /// `P×4` center/extent boxes in `(0, 1)`.
    pub boxes: Tensor<'g>,
    /// `P×D`, unit rows.
    pub visual_embeddings: Tensor<'g>,
    /// `P×Q` scaled cosine similarities.
    pub logits: Tensor<'g>,
}

/// Box and embedding heads evaluated on a batch of images (`B·P` rows).
#[derive(Debug, Clone)]
pub struct HeadOutputs<'g> {
    pub boxes: Tensor<'g>,
    pub visual_embeddings: Tensor<'g>,
    pub num_images: usize,
    pub proposals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn block_names(prefix: &str, layer: usize) -> [String; 10] {
    let p = format!("{prefix}.layer{layer}");
    [
        format!("{p}.ln1.gain"),
        format!("{p}.ln1.bias"),
        format!("{p}.attn.qkv.weight"),
        format!("{p}.attn.qkv.bias"),
        format!("{p}.attn.out.weight"),
        format!("{p}.attn.out.bias"),
        format!("{p}.ln2.gain"),
        format!("{p}.ln2.bias"),
        format!("{p}.mlp.fc1.weight"),
        format!("{p}.mlp.fc2.weight"),
    ]
}

impl Model {
    /// Random initialization; all randomness flows from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let (e, h, d) = (c.embed_dim, c.mlp_hidden, c.proj_dim);
        let std = c.init_std;
        let mut ps = ParamStore::new();

        ps.insert("image.patch.weight", trunc_normal(&mut rng, &[c.patch_dim(), e], std));
        ps.insert("image.patch.bias", Array::zeros(&[e]));
        ps.insert("image.pos", trunc_normal(&mut rng, &[c.num_proposals(), e], std));
        ps.insert("text.token", trunc_normal(&mut rng, &[c.text_vocab_size, e], std));
        ps.insert("text.pos", trunc_normal(&mut rng, &[c.text_max_len, e], std));
        for tower in ["image", "text"] {
            for l in 0..c.num_layers {
                let n = block_names(tower, l);
                ps.insert(&n[0], Array::filled(&[e], 1.0));
                ps.insert(&n[1], Array::zeros(&[e]));
                ps.insert(&n[2], trunc_normal(&mut rng, &[e, 3 * e], std));
                ps.insert(&n[3], Array::zeros(&[3 * e]));
                ps.insert(&n[4], trunc_normal(&mut rng, &[e, e], std));
                ps.insert(&n[5], Array::zeros(&[e]));
                ps.insert(&n[6], Array::filled(&[e], 1.0));
                ps.insert(&n[7], Array::zeros(&[e]));
                ps.insert(&n[8], trunc_normal(&mut rng, &[e, h], std));
                ps.insert(&format!("{tower}.layer{l}.mlp.fc1.bias"), Array::zeros(&[h]));
                ps.insert(&n[9], trunc_normal(&mut rng, &[h, e], std));
                ps.insert(&format!("{tower}.layer{l}.mlp.fc2.bias"), Array::zeros(&[e]));
            }
            ps.insert(&format!("{tower}.ln_final.gain"), Array::filled(&[e], 1.0));
            ps.insert(&format!("{tower}.ln_final.bias"), Array::zeros(&[e]));
        }
        ps.insert("text.proj.weight", trunc_normal(&mut rng, &[e, d], std));
        ps.insert("image.class_head.weight", trunc_normal(&mut rng, &[e, d], std));
        ps.insert("image.box_head.fc1.weight", trunc_normal(&mut rng, &[e, e], std));
        ps.insert("image.box_head.fc1.bias", Array::zeros(&[e]));
        ps.insert("image.box_head.fc2.weight", trunc_normal(&mut rng, &[e, e], std));
        ps.insert("image.box_head.fc2.bias", Array::zeros(&[e]));
        ps.insert("image.box_head.fc3.weight", trunc_normal(&mut rng, &[e, 4], std));
        ps.insert("image.box_head.fc3.bias", Array::zeros(&[4]));
        ps.insert("image.logit_scale", Array::scalar(c.logit_scale_init));
        Ok(Self { config, params: ps })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Model::new(config.clone(), 0)?;
        for (name, value) in reference.params.names().iter().zip(reference.params.values()) {
            match params.get(name) {
                Some(v) if v.shape() == value.shape() => {}
                Some(v) => {
                    return Err(ModelError::Config(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        v.shape(),
                        value.shape()
                    )))
                }
                None => return Err(ModelError::MissingParam(name.clone())),
            }
        }
        let mut ordered = ParamStore::new();
        for name in reference.params.names() {
            ordered.insert(name, params.get(name).unwrap().clone());
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    /// Current multiplier applied to cosine similarities.
    pub fn logit_scale(&self) -> f64 {
        self.params.get("image.logit_scale").map_or(1.0, |a| a.item().exp())
    }

    /// Flattens an image into `P` patch vectors, patches in raster order.
    pub fn patchify(&self, image: &Image) -> Result<Array> {
        let c = &self.config;
        if image.size != c.image_size || image.channels != c.channels {
            return Err(ModelError::ImageSize {
                got: image.size,
                channels: image.channels,
                want: c.image_size,
                want_channels: c.channels,
            });
        }
        let (g, ps) = (c.grid(), c.patch_size);
        let mut data = Vec::with_capacity(c.num_proposals() * c.patch_dim());
        for py in 0..g {
            for px in 0..g {
                for dy in 0..ps {
                    for dx in 0..ps {
                        data.extend(image.pixel(py * ps + dy, px * ps + dx).iter().map(|&v| v as f64));
                    }
                }
            }
        }
        Ok(Array::new(vec![c.num_proposals(), c.patch_dim()], data)?)
    }

    /// Logit-space prior that centres each proposal's box on its patch.
    pub fn box_bias(&self) -> Array {
        let g = self.config.grid();
        let size = logit(1.0 / g as f64);
        let mut rows = Vec::with_capacity(g * g);
        for py in 0..g {
            for px in 0..g {
                rows.push([
                    logit((px as f64 + 0.5) / g as f64),
                    logit((py as f64 + 0.5) / g as f64),
                    size,
                    size,
                ]);
            }
        }
        Array::from_rows(&rows).expect("uniform rows")
    }

    /// Image tower over a batch: `B·P × E` proposal embeddings.
    pub fn encode_images<'g>(&self, p: &Bound<'g, '_>, images: &[&Image]) -> Result<Tensor<'g>> {
        let graph = p.get("image.pos").graph();
        let np = self.config.num_proposals();
        let mut patches = Vec::with_capacity(images.len() * np * self.config.patch_dim());
        for img in images {
            patches.extend(self.patchify(img)?.into_data());
        }
        let x = graph.constant(Array::new(vec![images.len() * np, self.config.patch_dim()], patches)?);
        let x = linear(&x, p, "image.patch")?;
        let pos_idx: Vec<usize> = (0..images.len()).flat_map(|_| 0..np).collect();
        let mut x = x.add(&p.get("image.pos").gather_rows(&pos_idx)?)?;
        let segments: Vec<(usize, usize)> = (0..images.len()).map(|b| (b * np, np)).collect();
        for l in 0..self.config.num_layers {
            x = self.block(p, &x, "image", l, &segments, false)?;
        }
        layer_norm(&x, p, "image.ln_final")
    }

    /// Single-image form of [`Model::encode_images`]: `P × E`.
    pub fn encode_image<'g>(&self, p: &Bound<'g, '_>, image: &Image) -> Result<Tensor<'g>> {
        self.encode_images(p, &[image])
    }

    /// Text tower: one unit-norm `D`-vector per token sequence (`N × D`).
    pub fn encode_texts<'g>(&self, p: &Bound<'g, '_>, token_ids: &[Vec<usize>]) -> Result<Tensor<'g>> {
        let c = &self.config;
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(token_ids.len());
        let mut last = Vec::with_capacity(token_ids.len());
        for (i, seq) in token_ids.iter().enumerate() {
            if seq.is_empty() {
                return Err(ModelError::EmptyText(i));
            }
            if seq.len() > c.text_max_len {
                return Err(ModelError::TextTooLong {
                    index: i,
                    len: seq.len(),
                    max: c.text_max_len,
                });
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= c.text_vocab_size) {
                return Err(ModelError::TokenOutOfRange(bad));
            }
            segments.push((tokens.len(), seq.len()));
            tokens.extend_from_slice(seq);
            positions.extend(0..seq.len());
            last.push(tokens.len() - 1);
        }
        if token_ids.is_empty() {
            let graph = p.get("text.pos").graph();
            return Ok(graph.constant(Array::zeros(&[0, c.proj_dim])));
        }
        let x = p.get("text.token").gather_rows(&tokens)?;
        let mut x = x.add(&p.get("text.pos").gather_rows(&positions)?)?;
        for l in 0..c.num_layers {
            x = self.block(p, &x, "text", l, &segments, true)?;
        }
        let x = layer_norm(&x, p, "text.ln_final")?;
        let pooled = x.gather_rows(&last)?;
        Ok(pooled.matmul(&p.get("text.proj.weight"))?.l2_normalize_rows()?)
    }

    /// Single-query form of [`Model::encode_texts`]: a `1 × D` row.
    pub fn encode_text<'g>(&self, p: &Bound<'g, '_>, token_ids: &[usize]) -> Result<Tensor<'g>> {
        self.encode_texts(p, &[token_ids.to_vec()])
    }

    /// Text and box heads on `B·P` proposal embeddings.
    pub fn heads<'g>(&self, p: &Bound<'g, '_>, embeddings: &Tensor<'g>) -> Result<HeadOutputs<'g>> {
        let np = self.config.num_proposals();
        let rows = embeddings.with_value(|v| v.rows());
        let graph = embeddings.graph();
        let visual = embeddings.matmul(&p.get("image.class_head.weight"))?.l2_normalize_rows()?;

        let h = linear(embeddings, p, "image.box_head.fc1")?.relu();
        let h = linear(&h, p, "image.box_head.fc2")?.relu();
        let raw = linear(&h, p, "image.box_head.fc3")?;
        let bias = self.box_bias();
        let num_images = rows / np;
        let mut tiled = Vec::with_capacity(rows * 4);
        for _ in 0..num_images {
            tiled.extend_from_slice(bias.data());
        }
        let bias = graph.constant(Array::new(vec![rows, 4], tiled)?);
        let boxes = raw.add(&bias)?.sigmoid();
        Ok(HeadOutputs {
            boxes,
            visual_embeddings: visual,
            num_images,
            proposals: np,
        })
    }

    /// Output for image `b` of a head batch against `queries` (`Q × D`).
    pub fn output_for<'g>(
        &self,
        p: &Bound<'g, '_>,
        heads: &HeadOutputs<'g>,
        b: usize,
        queries: &Tensor<'g>,
    ) -> Result<ModelOutput<'g>> {
        let np = heads.proposals;
        let boxes = heads.boxes.narrow_rows(b * np, np)?;
        let visual = heads.visual_embeddings.narrow_rows(b * np, np)?;
        let logits = self.logits(p, &visual, queries)?;
        Ok(ModelOutput {
            boxes,
            visual_embeddings: visual,
            logits,
        })
    }

    /// `exp(logit_scale) · visual · queriesᵀ`.
    pub fn logits<'g>(&self, p: &Bound<'g, '_>, visual: &Tensor<'g>, queries: &Tensor<'g>) -> Result<Tensor<'g>> {
        let q = queries.with_value(|v| v.rows());
        if q == 0 {
            let rows = visual.with_value(|v| v.rows());
            return Ok(visual.graph().constant(Array::zeros(&[rows, 0])));
        }
        let scale = p.get("image.logit_scale").exp();
        Ok(visual.matmul_nt(queries)?.scale_by(&scale)?)
    }

    /// Heads plus logits for a single image's `P × E` embeddings.
    pub fn predict<'g>(
        &self,
        p: &Bound<'g, '_>,
        image_embeddings: &Tensor<'g>,
        query_embeddings: &Tensor<'g>,
    ) -> Result<ModelOutput<'g>> {
        let heads = self.heads(p, image_embeddings)?;
        self.output_for(p, &heads, 0, query_embeddings)
    }

    fn block<'g>(
        &self,
        p: &Bound<'g, '_>,
        x: &Tensor<'g>,
        tower: &str,
        layer: usize,
        segments: &[(usize, usize)],
        causal: bool,
    ) -> Result<Tensor<'g>> {
        let pre = format!("{tower}.layer{layer}");
        let h = layer_norm(x, p, &format!("{pre}.ln1"))?;
        let h = self.attention(p, &h, &pre, segments, causal)?;
        let x = x.add(&h)?;
        let h = layer_norm(&x, p, &format!("{pre}.ln2"))?;
        let h = linear(&h, p, &format!("{pre}.mlp.fc1"))?.relu();
        let h = linear(&h, p, &format!("{pre}.mlp.fc2"))?;
        Ok(x.add(&h)?)
    }

    fn attention<'g>(
        &self,
        p: &Bound<'g, '_>,
        x: &Tensor<'g>,
        pre: &str,
        segments: &[(usize, usize)],
        causal: bool,
    ) -> Result<Tensor<'g>> {
        let e = self.config.embed_dim;
        let dh = self.config.head_dim();
        let inv = 1.0 / (dh as f64).sqrt();
        let qkv = linear(x, p, &format!("{pre}.attn.qkv"))?;
        let mut outs = Vec::with_capacity(segments.len());
        for &(start, len) in segments {
            let seg = qkv.narrow_rows(start, len)?;
            let mut heads = Vec::with_capacity(self.config.num_heads);
            for hd in 0..self.config.num_heads {
                let q = seg.narrow_cols(hd * dh, dh)?;
                let k = seg.narrow_cols(e + hd * dh, dh)?;
                let v = seg.narrow_cols(2 * e + hd * dh, dh)?;
                let att = q.matmul_nt(&k)?.scale(inv).softmax_lastdim(causal)?;
                heads.push(att.matmul(&v)?);
            }
            outs.push(Tensor::concat_cols(&heads)?);
        }
        let merged = Tensor::concat_rows(&outs)?;
        linear(&merged, p, &format!("{pre}.attn.out"))
    }
}

fn linear<'g>(x: &Tensor<'g>, p: &Bound<'g, '_>, prefix: &str) -> Result<Tensor<'g>> {
    let w = p.get(&format!("{prefix}.weight"));
    let b = p.get(&format!("{prefix}.bias"));
    Ok(x.matmul(&w)?.add_row(&b)?)
}

fn layer_norm<'g>(x: &Tensor<'g>, p: &Bound<'g, '_>, prefix: &str) -> Result<Tensor<'g>> {
    let g = p.get(&format!("{prefix}.gain"));
    let b = p.get(&format!("{prefix}.bias"));
    Ok(x.layernorm_lastdim()?.mul_row(&g)?.add_row(&b)?)
}
