use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{AttnIds, EncoderLayer, FfnIds, Model, ModelIds};
use crate::data::{Batch, PaddedExample};
use crate::error::{invalid, shape_err, Result};
use crate::objectives::MaskPlan;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Dropout is active only in `Train` mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Region inputs for [`Session::embed_vision`]; `features` is `[R×d_v]`,
/// `boxes` is `R·4` normalized coordinates.
#[derive(Debug, Clone)]
pub struct VisualInput<T> {
    pub features: Var,
    pub boxes: Vec<T>,
    pub image_ids: Vec<usize>,
    pub region_ids: Vec<usize>,
}

/// Decoder logits for a whole batch, rows concatenated example by example.
#[derive(Debug, Clone)]
pub struct SeqOutput {
    pub logits: Var,
    /// One target per logits row; padding rows hold `PAD`.
    pub targets: Vec<usize>,
    /// Logits rows per example.
    pub lengths: Vec<usize>,
}

/// Predicted class distributions at every masked region slot.
#[derive(Debug, Clone)]
pub struct MimOutput<T> {
    pub probs: Var,
    /// Detector distributions `q` for the same rows.
    pub targets: Tensor<T>,
    /// Masked slots per example.
    pub counts: Vec<usize>,
    /// Region feature leaves, one per example.
    pub features: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct JointOutput<T> {
    pub mas: SeqOutput,
    pub vis2sum: SeqOutput,
    pub mim: Option<MimOutput<T>>,
}

/// One forward computation over a model: owns the autodiff graph and the
/// dropout stream.
pub struct Session<'m, 'p, T> {
    model: &'m Model<T>,
    pub graph: Graph<'p, T>,
    dropout: Option<(T, crate::Rng)>,
    /// Drop trailing padding before computing. Masked positions never affect
    /// real ones, so results are identical either way.
    pub trim_padding: bool,
    /// Record region features as differentiable inputs.
    pub feature_grad: bool,
}

fn key_mask(rows: usize, keys: &[bool]) -> Vec<bool> {
    let mut out = Vec::with_capacity(rows * keys.len());
    for _ in 0..rows {
        out.extend_from_slice(keys);
    }
    out
}

fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

fn real_len(mask: &[bool]) -> usize {
    mask.iter().rposition(|&m| m).map_or(1, |i| i + 1)
}

impl<'m, T: Scalar> Session<'m, 'm, T> {
    pub fn new(model: &'m Model<T>, mode: Mode) -> Self {
        Self::with_graph(model, Graph::new(&model.params), mode)
    }
}

impl<'m, 'p, T: Scalar> Session<'m, 'p, T> {
    fn with_graph(model: &'m Model<T>, graph: Graph<'p, T>, mode: Mode) -> Self {
        let dropout = match mode {
            Mode::Train { seed } if model.config.dropout > 0.0 => {
                Some((T::of(model.config.dropout), crate::rng_from_seed(seed)))
            }
            _ => None,
        };
        Self { model, graph, dropout, trim_padding: true, feature_grad: false }
    }

    /// A session reading parameters from `store` instead of the model's own
    /// store. `store` must have the model's layout (a clone or a perturbed
    /// copy of `model.params`).
    pub fn over(model: &'m Model<T>, store: &'p crate::tensor::ParamStore<T>, mode: Mode) -> Result<Self> {
        let same = store.len() == model.params.len()
            && store.ids().all(|id| store.get(id).dims2() == model.params.get(id).dims2());
        if !same {
            return Err(shape_err!("session", "parameter store does not match the model layout"));
        }
        Ok(Self::with_graph(model, Graph::new(store), mode))
    }

    /// Gives up the session, keeping the graph and its nodes.
    pub fn into_graph(self) -> Graph<'p, T> {
        self.graph
    }

    pub fn model(&self) -> &'m Model<T> {
        self.model
    }

    fn ids(&self) -> &'m ModelIds {
        self.model.ids()
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((p, rng)) = &mut self.dropout else { return Ok(x) };
        let p = *p;
        let (r, c) = self.graph.dims(x);
        let keep = T::one() / (T::one() - p);
        let pf = p.as_f64();
        let mask = (0..r * c).map(|_| if rng.random_bool(pf) { T::zero() } else { keep }).collect();
        self.graph.mul_const(x, mask)
    }

    fn linear(&mut self, x: Var, w: crate::tensor::ParamId, b: Option<crate::tensor::ParamId>) -> Result<Var> {
        let wv = self.graph.param(w);
        let y = self.graph.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = self.graph.param(b);
                self.graph.add_row(y, bv)
            }
            None => Ok(y),
        }
    }

    fn norm(&mut self, x: Var, gain: crate::tensor::ParamId) -> Result<Var> {
        let g = self.graph.param(gain);
        self.graph.rms_norm(x, g)
    }

    /// Multi-head scaled dot-product attention; `allowed` is `[Tq×Tk]`.
    fn attention(&mut self, q_in: Var, kv_in: Var, ids: &AttnIds, allowed: &[bool]) -> Result<Var> {
        let heads = self.model.config.heads;
        let q = self.linear(q_in, ids.q, None)?;
        let k = self.linear(kv_in, ids.k, None)?;
        let v = self.linear(kv_in, ids.v, None)?;
        let width = self.graph.dims(q).1;
        let dh = width / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.graph.slice_cols(q, h * dh, dh)?,
                    self.graph.slice_cols(k, h * dh, dh)?,
                    self.graph.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = self.graph.matmul_nt(qh, kh)?;
            let scores = self.graph.scale(scores, scale);
            let probs = self.graph.softmax(scores, Some(allowed))?;
            outs.push(self.graph.matmul(probs, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { self.graph.concat_cols(&outs)? };
        self.linear(cat, ids.o, None)
    }

    fn ffn(&mut self, x: Var, ids: &FfnIds) -> Result<Var> {
        let h = self.linear(x, ids.w1, Some(ids.b1))?;
        let h = self.graph.gelu(h);
        self.linear(h, ids.w2, Some(ids.b2))
    }

    fn encoder_stack(&mut self, mut x: Var, layers: &[EncoderLayer], mask: &[bool]) -> Result<Var> {
        let rows = self.graph.dims(x).0;
        if mask.len() != rows {
            return Err(shape_err!("encoder", "{} mask entries for {} positions", mask.len(), rows));
        }
        let allowed = key_mask(rows, mask);
        for layer in layers {
            let h = self.norm(x, layer.norm1)?;
            let a = self.attention(h, h, &layer.attn, &allowed)?;
            let a = self.dropout(a)?;
            x = self.graph.add(x, a)?;
            let h = self.norm(x, layer.norm2)?;
            let f = self.ffn(h, &layer.ffn)?;
            let f = self.dropout(f)?;
            x = self.graph.add(x, f)?;
        }
        Ok(x)
    }

    fn embed_tokens(&mut self, ids: &[usize]) -> Result<Var> {
        let cfg = &self.model.config;
        if ids.is_empty() {
            return Err(invalid!("cannot embed an empty token sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(invalid!("token id {} is outside the vocabulary of {}", bad, cfg.vocab_size));
        }
        let table = self.graph.param(self.ids().embed);
        let x = self.graph.gather_rows(table, ids)?;
        let pe = &self.model.positions;
        let width = cfg.d_model;
        let pe = self.graph.constant_matrix(ids.len(), width, pe.data()[..ids.len() * width].to_vec())?;
        let z = self.graph.add(x, pe)?;
        self.dropout(z)
    }

    /// Token embeddings plus sinusoidal positions, `[T×d]`.
    pub fn embed_text(&mut self, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.model.config.max_text_len {
            return Err(invalid!("article of {} tokens exceeds max_text_len {}", ids.len(), self.model.config.max_text_len));
        }
        self.embed_tokens(ids)
    }

    /// `L` residual self-attention + feed-forward layers over the article.
    pub fn encode_text(&mut self, z0: Var, mask: &[bool]) -> Result<Var> {
        let layers = &self.ids().text_layers;
        self.encoder_stack(z0, layers, mask)
    }

    /// Region feature + box projection + image-id + region-id embeddings.
    pub fn embed_vision(&mut self, input: &VisualInput<T>) -> Result<Var> {
        let (r, dv) = self.graph.dims(input.features);
        let cfg = &self.model.config;
        if dv != cfg.d_visual || input.boxes.len() != r * 4 || input.image_ids.len() != r || input.region_ids.len() != r {
            return Err(shape_err!("embed_vision", "inconsistent region inputs for {} slots", r));
        }
        if let Some(b) = input.boxes.iter().find(|b| !(**b >= T::zero() && **b <= T::one())) {
            return Err(invalid!("box coordinate {:?} outside [0, 1]", b));
        }
        if input.image_ids.iter().any(|&i| i >= cfg.n_images) || input.region_ids.iter().any(|&j| j >= cfg.regions_per_image) {
            return Err(invalid!("image or region id out of range"));
        }
        let ids = self.ids();
        let boxes = self.graph.constant_matrix(r, 4, input.boxes.clone())?;
        let e_box = self.linear(boxes, ids.box_w, Some(ids.box_b))?;
        let img_table = self.graph.param(ids.image_embed);
        let e_img = self.graph.gather_rows(img_table, &input.image_ids)?;
        let reg_table = self.graph.param(ids.region_embed);
        let e_reg = self.graph.gather_rows(reg_table, &input.region_ids)?;
        let o = self.graph.add(input.features, e_box)?;
        let o = self.graph.add(o, e_img)?;
        let o = self.graph.add(o, e_reg)?;
        self.dropout(o)
    }

    /// `H` residual layers over the region sequence.
    pub fn encode_vision(&mut self, o: Var, mask: &[bool]) -> Result<Var> {
        let layers = &self.ids().visual_layers;
        self.encoder_stack(o, layers, mask)
    }

    /// Vision-guided fusion returning `(Z_{T+V}, G)`.
    pub fn fuse_with_gate(&mut self, z_text: Var, z_vision: Var, vision_mask: &[bool]) -> Result<(Var, Var)> {
        let rows = self.graph.dims(z_text).0;
        if vision_mask.len() != self.graph.dims(z_vision).0 {
            return Err(shape_err!("fuse", "vision mask does not match {} regions", self.graph.dims(z_vision).0));
        }
        let ids = self.ids();
        let allowed = key_mask(rows, vision_mask);
        let m = self.attention(z_text, z_vision, &ids.fusion_attn, &allowed)?;
        let cat = self.graph.concat_cols(&[z_text, m])?;
        let pre = self.linear(cat, ids.gate_w, Some(ids.gate_b))?;
        let gate = self.graph.sigmoid(pre);
        let gated = self.graph.mul(gate, m)?;
        let cat = self.graph.concat_cols(&[z_text, gated])?;
        let out = self.linear(cat, ids.fuse_w, Some(ids.fuse_b))?;
        Ok((out, gate))
    }

    pub fn fuse(&mut self, z_text: Var, z_vision: Var, vision_mask: &[bool]) -> Result<Var> {
        self.fuse_with_gate(z_text, z_vision, vision_mask).map(|(z, _)| z)
    }

    /// Next-token logits `[|prefix|×V]` for a decoder prefix (starting with
    /// `START`) attending over `memory`.
    pub fn decode(&mut self, prefix: &[usize], memory: Var, memory_mask: &[bool]) -> Result<Var> {
        let cfg = &self.model.config;
        if prefix.len() > cfg.max_summary_len {
            return Err(invalid!("decoder prefix of {} exceeds max_summary_len {}", prefix.len(), cfg.max_summary_len));
        }
        let (mem_rows, mem_width) = self.graph.dims(memory);
        if mem_width != cfg.d_model || memory_mask.len() != mem_rows {
            return Err(shape_err!("decode", "memory [{}x{}] with {} mask entries", mem_rows, mem_width, memory_mask.len()));
        }
        let ids = self.ids();
        let n = prefix.len();
        let causal = causal_mask(n);
        let cross = key_mask(n, memory_mask);
        let mut x = self.embed_tokens(prefix)?;
        for layer in &ids.decoder_layers {
            let h = self.norm(x, layer.norm1)?;
            let a = self.attention(h, h, &layer.self_attn, &causal)?;
            let a = self.dropout(a)?;
            x = self.graph.add(x, a)?;
            let h = self.norm(x, layer.norm2)?;
            let c = self.attention(h, memory, &layer.cross_attn, &cross)?;
            let c = self.dropout(c)?;
            x = self.graph.add(x, c)?;
            let h = self.norm(x, layer.norm3)?;
            let f = self.ffn(h, &layer.ffn)?;
            let f = self.dropout(f)?;
            x = self.graph.add(x, f)?;
        }
        let h = self.norm(x, ids.decoder_norm)?;
        self.linear(h, ids.out_w, Some(ids.out_b))
    }

    /// Projects visual states into decoder memory width.
    pub fn bridge(&mut self, z_vision: Var) -> Result<Var> {
        self.linear(z_vision, self.ids().bridge, None)
    }

    fn text_len(&self, ex: &PaddedExample) -> usize {
        if self.trim_padding {
            real_len(&ex.article_mask)
        } else {
            ex.article.len()
        }
    }

    fn summary_len(&self, ex: &PaddedExample) -> usize {
        if self.trim_padding {
            real_len(&ex.summary_mask)
        } else {
            ex.summary.len()
        }
    }

    fn region_len(&self, ex: &PaddedExample) -> usize {
        if self.trim_padding {
            real_len(&ex.region_mask)
        } else {
            ex.region_mask.len()
        }
    }

    /// Region inputs for the first `slots` slots; `keep` zeroes masked slots.
    fn visual_input(&mut self, ex: &PaddedExample, slots: usize, keep: Option<&[T]>) -> Result<(VisualInput<T>, Var)> {
        let cfg = &self.model.config;
        let dv = cfg.d_visual;
        let m = cfg.regions_per_image;
        if ex.features.len() < slots * dv || ex.boxes.len() < slots * 4 {
            return Err(shape_err!("visual_input", "example holds fewer than {} region slots", slots));
        }
        let feats = Tensor::matrix(slots, dv, ex.features[..slots * dv].iter().map(|&v| T::of(v as f64)).collect())?;
        let mut features = self.graph.input(&feats, self.feature_grad);
        let leaf = features;
        if let Some(keep) = keep {
            features = self.graph.scale_rows(features, keep)?;
        }
        let input = VisualInput {
            features,
            boxes: ex.boxes[..slots * 4].iter().map(|&v| T::of(v as f64)).collect(),
            image_ids: (0..slots).map(|s| s / m).collect(),
            region_ids: (0..slots).map(|s| s % m).collect(),
        };
        Ok((input, leaf))
    }

    fn encode_example_text(&mut self, ex: &PaddedExample) -> Result<(Var, usize)> {
        let t = self.text_len(ex);
        let z0 = self.embed_text(&ex.article[..t])?;
        let z = self.encode_text(z0, &ex.article_mask[..t])?;
        Ok((z, t))
    }

    fn encode_example_vision(&mut self, ex: &PaddedExample) -> Result<(Var, usize)> {
        let r = self.region_len(ex);
        let (input, _) = self.visual_input(ex, r, None)?;
        let o = self.embed_vision(&input)?;
        let z = self.encode_vision(o, &ex.region_mask[..r])?;
        Ok((z, r))
    }

    fn collect(&mut self, rows: Vec<Var>, batch: &Batch, lens: Vec<usize>) -> Result<SeqOutput> {
        let logits = if rows.len() == 1 { rows[0] } else { self.graph.concat_rows(&rows)? };
        let targets = batch.items.iter().zip(&lens).flat_map(|(ex, &n)| ex.summary[..n].iter().copied()).collect();
        Ok(SeqOutput { logits, targets, lengths: lens })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let cfg = &self.model.config;
        if batch.is_empty() {
            return Err(invalid!("empty batch"));
        }
        for ex in &batch.items {
            if ex.article.len() != cfg.max_text_len
                || ex.summary.len() != cfg.max_summary_len
                || ex.region_mask.len() != cfg.visual_len()
            {
                return Err(shape_err!("batch", "example is not padded to the model lengths"));
            }
        }
        Ok(())
    }

    /// Full multimodal path: article and images → fused memory → decoder.
    pub fn forward_mas(&mut self, batch: &Batch) -> Result<SeqOutput> {
        self.check_batch(batch)?;
        let mut rows = Vec::with_capacity(batch.len());
        let mut lens = Vec::with_capacity(batch.len());
        for ex in &batch.items {
            let (zt, t) = self.encode_example_text(ex)?;
            let (zv, r) = self.encode_example_vision(ex)?;
            let memory = self.fuse(zt, zv, &ex.region_mask[..r])?;
            let s = self.summary_len(ex);
            rows.push(self.decode(&ex.decoder_input()[..s], memory, &ex.article_mask[..t])?);
            lens.push(s);
        }
        self.collect(rows, batch, lens)
    }

    /// Vision-only path: the shared decoder reads bridged visual states.
    pub fn forward_vis2sum(&mut self, batch: &Batch) -> Result<SeqOutput> {
        self.check_batch(batch)?;
        let mut rows = Vec::with_capacity(batch.len());
        let mut lens = Vec::with_capacity(batch.len());
        for ex in &batch.items {
            let (zv, r) = self.encode_example_vision(ex)?;
            let memory = self.bridge(zv)?;
            let s = self.summary_len(ex);
            rows.push(self.decode(&ex.decoder_input()[..s], memory, &ex.region_mask[..r])?);
            lens.push(s);
        }
        self.collect(rows, batch, lens)
    }

    /// Masked-region class prediction from `[O_mask; Y]` through the visual
    /// encoder. Masked slots are zeroed inside the graph, so their stored
    /// features cannot influence the result.
    pub fn forward_mim(&mut self, batch: &Batch, plan: &MaskPlan) -> Result<MimOutput<T>> {
        self.check_batch(batch)?;
        if plan.masked.len() != batch.len() {
            return Err(shape_err!("forward_mim", "mask plan covers {} examples, batch has {}", plan.masked.len(), batch.len()));
        }
        if plan.masked.iter().all(Vec::is_empty) {
            return Err(invalid!("no masked region present in the batch"));
        }
        let c = self.model.config.detector_classes;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut counts = Vec::with_capacity(batch.len());
        let mut features = Vec::with_capacity(batch.len());
        for (ex, masked) in batch.items.iter().zip(&plan.masked) {
            counts.push(masked.len());
            if masked.is_empty() {
                continue;
            }
            let r = if self.trim_padding { real_len(&ex.region_mask) } else { ex.region_mask.len() };
            let r = r.max(masked.iter().max().map_or(0, |&s| s + 1));
            if r > ex.region_mask.len() {
                return Err(invalid!("masked slot outside the region sequence"));
            }
            let mut keep = vec![T::one(); r];
            for &s in masked {
                keep[s] = T::zero();
            }
            let (input, leaf) = self.visual_input(ex, r, Some(&keep))?;
            features.push(leaf);
            let o = self.embed_vision(&input)?;
            let summary = ex.target_tokens();
            let y = self.embed_tokens(summary)?;
            let y = self.linear(y, self.ids().summary_proj, None)?;
            let seq = self.graph.concat_rows(&[o, y])?;
            let mut mask = ex.region_mask[..r].to_vec();
            mask.extend(core::iter::repeat_n(true, summary.len()));
            let z = self.encode_vision(seq, &mask)?;
            rows.push(self.graph.gather_rows(z, masked)?);
            for &s in masked {
                targets.extend(ex.classes[s * c..(s + 1) * c].iter().map(|&q| T::of(q as f64)));
            }
        }
        let picked = if rows.len() == 1 { rows[0] } else { self.graph.concat_rows(&rows)? };
        let ids = self.ids();
        let h = self.linear(picked, ids.mim_w1, Some(ids.mim_b1))?;
        let h = self.graph.gelu(h);
        let logits = self.linear(h, ids.mim_w2, Some(ids.mim_b2))?;
        let probs = self.graph.softmax(logits, None)?;
        let n = targets.len() / c;
        Ok(MimOutput { probs, targets: Tensor::matrix(n, c, targets)?, counts, features })
    }

    /// All three paths on one batch; the unmasked visual encoding is shared
    /// by the MAS and Vis2Sum paths.
    pub fn forward_joint(&mut self, batch: &Batch, plan: Option<&MaskPlan>) -> Result<JointOutput<T>> {
        self.check_batch(batch)?;
        let mut mas_rows = Vec::with_capacity(batch.len());
        let mut v2s_rows = Vec::with_capacity(batch.len());
        let mut lens = Vec::with_capacity(batch.len());
        for ex in &batch.items {
            let (zt, t) = self.encode_example_text(ex)?;
            let (zv, r) = self.encode_example_vision(ex)?;
            let s = self.summary_len(ex);
            let prefix = &ex.decoder_input()[..s];
            let memory = self.fuse(zt, zv, &ex.region_mask[..r])?;
            mas_rows.push(self.decode(prefix, memory, &ex.article_mask[..t])?);
            let bridged = self.bridge(zv)?;
            v2s_rows.push(self.decode(prefix, bridged, &ex.region_mask[..r])?);
            lens.push(s);
        }
        let mas = self.collect(mas_rows, batch, lens.clone())?;
        let vis2sum = self.collect(v2s_rows, batch, lens)?;
        let mim = match plan {
            Some(p) if p.masked.iter().any(|m| !m.is_empty()) => Some(self.forward_mim(batch, p)?),
            _ => None,
        };
        Ok(JointOutput { mas, vis2sum, mim })
    }

    /// Encoder side of the MAS path for one example: `(memory, memory mask)`.
    pub fn encode_example(&mut self, ex: &PaddedExample) -> Result<(Var, Vec<bool>)> {
        let (zt, t) = self.encode_example_text(ex)?;
        let (zv, r) = self.encode_example_vision(ex)?;
        let memory = self.fuse(zt, zv, &ex.region_mask[..r])?;
        Ok((memory, ex.article_mask[..t].to_vec()))
    }

    /// Encoder side of the Vis2Sum path for one example.
    pub fn encode_example_visual_memory(&mut self, ex: &PaddedExample) -> Result<(Var, Vec<bool>)> {
        let (zv, r) = self.encode_example_vision(ex)?;
        let memory = self.bridge(zv)?;
        Ok((memory, ex.region_mask[..r].to_vec()))
    }
}
