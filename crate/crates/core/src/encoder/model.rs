use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{EncoderConfig, InputSequence};
use crate::error::{Error, Result};
use crate::tensor::{lit, Axis, Element, ParamId, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Affine map `x W (+ b)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub attn_norm: Norm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: Norm,
}

/// Handles to every learnable tensor of the model.
#[derive(Clone, Debug)]
pub struct ModelIds {
    pub token_emb: ParamId,
    pub segment_emb: ParamId,
    pub position_emb: ParamId,
    pub emb_norm: Norm,
    pub layers: Vec<LayerIds>,
    pub patch_proj: Linear,
    pub pixel_proj: Linear,
    /// Bias-free projection of the `[CLS]` state to the retrieval space.
    pub retrieval: Linear,
    pub mlm_head: Linear,
    pub mpm_head: Linear,
    pub tip_head: Linear,
    pub disc_hidden: Linear,
    pub disc_out: Linear,
}

/// Hidden states plus per-layer, per-head attention probabilities.
#[derive(Clone, Debug)]
pub struct TransformerOutput {
    pub hidden: Var,
    pub attention: Vec<Vec<Var>>,
}

/// Result of a full encode.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub hidden: Var,
    /// Unit-norm retrieval embedding, shape `1 x d`.
    pub embedding: Var,
}

pub const DISC_HIDDEN: usize = 64;

/// Shared encoder, task heads and discriminator.
#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    pub config: EncoderConfig,
    pub store: ParamStore<T>,
    pub ids: ModelIds,
}

struct Init<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, shape: [usize; 2], std: f32) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..shape[0] * shape[1]).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, Tensor::new(shape, data).expect("shape"))
    }

    fn fill(&mut self, name: &str, len: usize, value: f32) -> ParamId {
        self.store.add(name, Tensor::filled([len], value))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f32, bias: bool) -> Linear {
        let weight = self.normal(&format!("{name}.weight"), [fan_in, fan_out], std);
        let bias = bias.then(|| self.fill(&format!("{name}.bias"), fan_out, 0.0));
        Linear { weight, bias }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gain: self.fill(&format!("{name}.gain"), dim, 1.0),
            bias: self.fill(&format!("{name}.bias"), dim, 0.0),
        }
    }
}

fn build(config: &EncoderConfig, init: &mut Init<'_>) -> ModelIds {
    let d = config.hidden_dim;
    let std = 0.02;
    let token_emb = init.normal("embeddings.token", [config.vocab_size, d], std);
    let segment_emb = init.normal("embeddings.segment", [config.segment_vocab, d], std);
    let position_emb = init.normal("embeddings.position", [config.max_positions, d], std);
    let emb_norm = init.norm("embeddings.norm", d);
    let layers = (0..config.layers)
        .map(|l| {
            let p = format!("layer{l}");
            LayerIds {
                query: init.linear(&format!("{p}.attn.query"), d, d, std, true),
                key: init.linear(&format!("{p}.attn.key"), d, d, std, true),
                value: init.linear(&format!("{p}.attn.value"), d, d, std, true),
                out: init.linear(&format!("{p}.attn.out"), d, d, std, true),
                attn_norm: init.norm(&format!("{p}.attn.norm"), d),
                ff_in: init.linear(&format!("{p}.ff.in"), d, config.ff_dim, std, true),
                ff_out: init.linear(&format!("{p}.ff.out"), config.ff_dim, d, std, true),
                ff_norm: init.norm(&format!("{p}.ff.norm"), d),
            }
        })
        .collect();
    let patch_proj = init.linear("image.patch_proj", config.patch_feature_dim, d, std, true);
    let pixel_proj = init.linear("image.pixel_proj", config.pixel_patch_dim, d, std, true);
    let retrieval = init.linear(
        "retrieval.proj",
        d,
        config.retrieval_dim,
        (1.0 / d as f32).sqrt(),
        false,
    );
    let mlm_head = init.linear("heads.mlm", d, config.vocab_size, std, true);
    let mpm_head = init.linear("heads.mpm", d, config.patch_feature_dim, std, true);
    let tip_head = init.linear("heads.tip", d, 1, std, true);
    let disc_hidden = init.linear(
        "disc.hidden",
        config.retrieval_dim,
        DISC_HIDDEN,
        (2.0 / config.retrieval_dim as f32).sqrt(),
        true,
    );
    let disc_out = init.linear("disc.out", DISC_HIDDEN, 1, (1.0 / DISC_HIDDEN as f32).sqrt(), true);
    ModelIds {
        token_emb,
        segment_emb,
        position_emb,
        emb_norm,
        layers,
        patch_proj,
        pixel_proj,
        retrieval,
        mlm_head,
        mpm_head,
        tip_head,
        disc_hidden,
        disc_out,
    }
}

fn tag_layer(layer: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("layer {layer}: {op}"),
        },
        other => other,
    }
}

impl Model<f32> {
    /// Fresh model with seeded random initialization.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let ids = build(
            &config,
            &mut Init {
                store: &mut store,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
        );
        Ok(Model { config, store, ids })
    }

    /// Shallower copy for query-side distillation: embeddings, projections,
    /// heads and the first `layers` transformer layers are copied by name.
    pub fn truncated(&self, layers: usize) -> Result<Self> {
        if layers == 0 || layers >= self.config.layers {
            return Err(Error::config(
                "serving.student_layers",
                format!(
                    "student needs between 1 and {} layers, got {layers}",
                    self.config.layers.saturating_sub(1)
                ),
            ));
        }
        let config = EncoderConfig {
            layers,
            ..self.config.clone()
        };
        let mut student = Model::new(config, 0)?;
        let names: Vec<(ParamId, String)> =
            student.store.iter().map(|(id, n, _)| (id, n.to_string())).collect();
        for (id, name) in names {
            let src = self.store.id(&name).expect("student names are a subset");
            student.store.set(id, self.store.get(src).clone())?;
        }
        Ok(student)
    }
}

impl<T: Element> Model<T> {
    /// Same model in another element type (for f64 gradient checks).
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Parameters of the shared towers: embeddings, transformer layers and
    /// the image and retrieval projections.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        let ids = &self.ids;
        let mut out = vec![
            ids.token_emb,
            ids.segment_emb,
            ids.position_emb,
            ids.emb_norm.gain,
            ids.emb_norm.bias,
        ];
        for l in &ids.layers {
            for lin in [&l.query, &l.key, &l.value, &l.out, &l.ff_in, &l.ff_out] {
                out.extend(lin.params());
            }
            out.extend([l.attn_norm.gain, l.attn_norm.bias, l.ff_norm.gain, l.ff_norm.bias]);
        }
        out.extend(ids.patch_proj.params());
        out.extend(ids.pixel_proj.params());
        out.extend(ids.retrieval.params());
        out
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        let ids = &self.ids;
        [ids.mlm_head, ids.mpm_head, ids.tip_head]
            .iter()
            .flat_map(Linear::params)
            .collect()
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        let mut v = self.ids.disc_hidden.params();
        v.extend(self.ids.disc_out.params());
        v
    }

    /// Projects patch features and pixel vectors to hidden width; rows follow
    /// [`ImageTokens::dense_positions`](super::ImageTokens::dense_positions).
    pub fn project_image(&self, tape: &mut Tape<'_, T>, seq: &InputSequence) -> Result<Option<Var>> {
        let Some(img) = &seq.image else { return Ok(None) };
        let mut parts = Vec::with_capacity(2);
        if !img.patch_positions.is_empty() {
            let x = tape.constant(img.patch_features.cast());
            parts.push(self.ids.patch_proj.forward(tape, x)?);
        }
        if !img.pixel_positions.is_empty() {
            let x = tape.constant(img.pixel_vectors.cast());
            parts.push(self.ids.pixel_proj.forward(tape, x)?);
        }
        match parts.len() {
            0 => Ok(None),
            1 => Ok(Some(parts[0])),
            _ => tape.concat(&parts, Axis::Rows).map(Some),
        }
    }

    /// Token (or dense) + segment + position embedding per position.
    ///
    /// `dense` holds one hidden-width row per image position, in
    /// `dense_positions` order.
    pub fn embed_input(&self, tape: &mut Tape<'_, T>, seq: &InputSequence, dense: Option<Var>) -> Result<Var> {
        seq.validate()?;
        let cfg = &self.config;
        let n = seq.len();
        let mut text_ids = Vec::new();
        let mut source_row = vec![0usize; n];
        for (i, &t) in seq.token_ids.iter().enumerate() {
            if t >= 0 {
                if t as usize >= cfg.vocab_size {
                    return Err(Error::Index {
                        what: "token vocabulary",
                        index: t as i64,
                        size: cfg.vocab_size,
                    });
                }
                source_row[i] = text_ids.len();
                text_ids.push(t as usize);
            }
        }
        let n_text = text_ids.len();
        let dense_positions: Vec<usize> = seq
            .image
            .as_ref()
            .map(|img| img.dense_positions().collect())
            .unwrap_or_default();
        for (r, &p) in dense_positions.iter().enumerate() {
            source_row[p] = n_text + r;
        }
        for &s in &seq.segment_ids {
            if s as usize >= cfg.segment_vocab {
                return Err(Error::Index {
                    what: "segment vocabulary",
                    index: s as i64,
                    size: cfg.segment_vocab,
                });
            }
        }
        for &p in &seq.position_ids {
            if p >= cfg.max_positions {
                return Err(Error::Index {
                    what: "position table",
                    index: p as i64,
                    size: cfg.max_positions,
                });
            }
        }

        let mut pieces = Vec::with_capacity(2);
        if n_text > 0 {
            let table = tape.param(self.ids.token_emb);
            pieces.push(tape.gather_rows(table, &text_ids)?);
        }
        if !dense_positions.is_empty() {
            let d = dense.ok_or_else(|| Error::Invalid("sequence has image positions but no dense input".into()))?;
            let shape = tape.value(d).shape().to_vec();
            if shape != [dense_positions.len(), cfg.hidden_dim] {
                return Err(Error::Shape {
                    op: "embed_input",
                    lhs: vec![dense_positions.len(), cfg.hidden_dim],
                    rhs: shape,
                });
            }
            pieces.push(d);
        }
        let content = if pieces.len() == 1 {
            pieces[0]
        } else {
            tape.concat(&pieces, Axis::Rows)?
        };
        let content = tape.gather_rows(content, &source_row)?;
        let seg_table = tape.param(self.ids.segment_emb);
        let seg_ids: Vec<usize> = seq.segment_ids.iter().map(|s| *s as usize).collect();
        let seg = tape.gather_rows(seg_table, &seg_ids)?;
        let pos_table = tape.param(self.ids.position_emb);
        let pos = tape.gather_rows(pos_table, &seq.position_ids)?;
        let x = tape.add(content, seg)?;
        tape.add(x, pos)
    }

    /// Post-norm transformer stack over embedded inputs. Keys with mask 0
    /// receive zero attention from every query position.
    pub fn transformer_forward(
        &self,
        tape: &mut Tape<'_, T>,
        embedded: Var,
        mask: &[u8],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TransformerOutput> {
        let shape = tape.value(embedded).shape().to_vec();
        if shape.len() != 2 || shape[0] != mask.len() {
            return Err(Error::Shape {
                op: "transformer_forward",
                lhs: shape,
                rhs: vec![mask.len()],
            });
        }
        let key_mask: Vec<bool> = mask.iter().map(|m| *m == 1).collect();
        let mut x = self.ids.emb_norm.forward(tape, embedded)?;
        if let Some(r) = rng.as_deref_mut() {
            x = tape.dropout(x, self.config.dropout, r)?;
        }
        let mut attention = Vec::with_capacity(self.ids.layers.len());
        for (l, layer) in self.ids.layers.iter().enumerate() {
            let (next, probs) = self
                .layer_forward(tape, layer, x, &key_mask, rng.as_deref_mut())
                .map_err(tag_layer(l))?;
            x = next;
            attention.push(probs);
        }
        Ok(TransformerOutput { hidden: x, attention })
    }

    fn layer_forward(
        &self,
        tape: &mut Tape<'_, T>,
        layer: &LayerIds,
        x: Var,
        key_mask: &[bool],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<Var>)> {
        let p = self.config.dropout;
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let q = layer.query.forward(tape, x)?;
        let q = tape.scale(q, scale)?;
        let k = layer.key.forward(tape, x)?;
        let v = layer.value.forward(tape, x)?;
        let mut outs = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = tape.slice(q, Axis::Cols, s, e)?;
            let kh = tape.slice(k, Axis::Cols, s, e)?;
            let vh = tape.slice(v, Axis::Cols, s, e)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let pr = tape.masked_softmax(scores, Some(key_mask))?;
            probs.push(pr);
            outs.push(tape.matmul(pr, vh)?);
        }
        let ctx = if heads == 1 { outs[0] } else { tape.concat(&outs, Axis::Cols)? };
        let mut a = layer.out.forward(tape, ctx)?;
        if let Some(r) = rng.as_deref_mut() {
            a = tape.dropout(a, p, r)?;
        }
        let y = tape.add(x, a)?;
        let y = layer.attn_norm.forward(tape, y)?;
        let f = layer.ff_in.forward(tape, y)?;
        let f = tape.gelu(f)?;
        let mut f = layer.ff_out.forward(tape, f)?;
        if let Some(r) = rng.as_deref_mut() {
            f = tape.dropout(f, p, r)?;
        }
        let z = tape.add(y, f)?;
        Ok((layer.ff_norm.forward(tape, z)?, probs))
    }

    /// Retrieval embedding: `[CLS]` row, bias-free projection, L2 norm.
    pub fn pool_embedding(&self, tape: &mut Tape<'_, T>, hidden: Var) -> Result<Var> {
        let cls = tape.slice(hidden, Axis::Rows, 0, 1)?;
        let z = self.ids.retrieval.forward(tape, cls)?;
        tape.l2_normalize(z)
    }

    pub fn encode(
        &self,
        tape: &mut Tape<'_, T>,
        seq: &InputSequence,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Encoded> {
        let dense = self.project_image(tape, seq)?;
        let x = self.embed_input(tape, seq, dense)?;
        let out = self.transformer_forward(tape, x, &seq.attention_mask, rng.as_deref_mut())?;
        let embedding = self.pool_embedding(tape, out.hidden)?;
        Ok(Encoded {
            hidden: out.hidden,
            embedding,
        })
    }

    /// Inference-only embedding of one sequence.
    pub fn embed(&self, seq: &InputSequence) -> Result<Vec<T>> {
        let mut tape = Tape::inference(&self.store);
        let enc = self.encode(&mut tape, seq, None)?;
        Ok(tape.value(enc.embedding).data().to_vec())
    }

    /// Discriminator probability that each row of `emb` is a query embedding.
    pub fn discriminate(&self, tape: &mut Tape<'_, T>, emb: Var) -> Result<Var> {
        let h = self.ids.disc_hidden.forward(tape, emb)?;
        let h = tape.relu(h)?;
        let o = self.ids.disc_out.forward(tape, h)?;
        tape.sigmoid(o)
    }

    /// Multiply-accumulate count of one encode of a sequence of length `len`
    /// (transformer stack only).
    pub fn forward_cost(&self, len: usize) -> u64 {
        let c = &self.config;
        let (n, d, f) = (len as u64, c.hidden_dim as u64, c.ff_dim as u64);
        let per_layer = 4 * n * d * d + 2 * n * n * d + 2 * n * d * f;
        per_layer * c.layers as u64
    }
}
