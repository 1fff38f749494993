//! The full model: input projection, LID-frame splice, Cross-CTC taps,
//! shared CTC head, the combined loss, and the checkpoint format.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_head, ctc_loss_node, CtcPosterior, Vocabulary};
use crate::encoder::{
    build_stack, cross_attention_layer, self_attention_layer, sinusoidal_positions, stream_rng,
    EncoderLayer, InitSource, LayerKind, LayerSpec, QueryProjection, StackConfig, Surgery,
};
use crate::error::{Error, Result};
use crate::numcore::params::{Bound, Param, ParamId, ParamStore};
use crate::numcore::{NodeId, Scalar, Tape, Tensor};

const STREAM_INPUT: u64 = 1;
const STREAM_HEAD: u64 = 2;

/// Loss weight used when taps are present and none is given.
pub const DEFAULT_TAP_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SshrConfig {
    pub stack: StackConfig,
    pub input_dim: usize,
    /// 1-based layer whose pooled output becomes the LID frame.
    #[serde(default)]
    pub lid_extract_layer: Option<usize>,
    #[serde(default)]
    pub lid_in_targets: bool,
    /// 1-based layers whose posteriors feed the following layer's queries.
    #[serde(default)]
    pub cross_taps: Vec<usize>,
    /// `w`; defaults to 0.5 with taps and 0 without.
    #[serde(default)]
    pub loss_weight: Option<f64>,
    pub vocabulary: Vocabulary,
    pub seed: u64,
}

impl SshrConfig {
    pub fn weight(&self) -> f64 {
        self.loss_weight.unwrap_or(if self.cross_taps.is_empty() {
            0.0
        } else {
            DEFAULT_TAP_WEIGHT
        })
    }

    /// Copy with every default written out.
    pub fn resolved(&self) -> Self {
        Self {
            loss_weight: Some(self.weight()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stack.validate()?;
        self.vocabulary.validate()?;
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        let depth = self.stack.surviving_depth();
        if let Some(i) = self.lid_extract_layer {
            if i == 0 || i >= depth {
                return Err(Error::config(format!(
                    "lid_extract_layer {i} is outside 1..{} for a surviving depth of {depth}",
                    depth - 1
                )));
            }
            if !self.lid_in_targets {
                return Err(Error::config(
                    "lid_extract_layer requires lid_in_targets (the frame is supervised only through the LID token)",
                ));
            }
        }
        let w = self.weight();
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::config(format!("loss weight {w} is outside [0, 1]")));
        }
        if self.cross_taps.is_empty() && w != 0.0 {
            return Err(Error::config(format!(
                "loss weight {w} needs at least one cross tap"
            )));
        }
        build_stack(&self.stack, &self.cross_taps).map(|_| ())
    }

    /// Whether the CTC term read at layer `layer` uses LID-prefixed targets.
    pub fn lid_targets_at(&self, layer: usize) -> bool {
        self.lid_in_targets && self.lid_extract_layer.is_none_or(|i| layer >= i)
    }
}

/// `[lid_token(lang)] ++ transcript` when `lid`, else the transcript.
pub fn make_targets(transcript: &[usize], lang: usize, vocab: &Vocabulary, lid: bool) -> Result<Vec<usize>> {
    if transcript.is_empty() {
        return Err(Error::EmptyInput { op: "make_targets" });
    }
    if let Some(&t) = transcript.iter().find(|&&t| !vocab.is_phoneme(t)) {
        return Err(Error::config(format!("token {t} is not a phoneme")));
    }
    let lid_tok = vocab.lid_token(lang)?;
    let mut out = Vec::with_capacity(transcript.len() + 1);
    if lid {
        out.push(lid_tok);
    }
    out.extend_from_slice(transcript);
    Ok(out)
}

/// `(1 − w)·final + w·mean(taps)`.
///
/// With no taps only `w = 0` is meaningful and the result is `final`.
pub fn combine_losses(final_loss: f64, tap_losses: &[f64], w: f64) -> Result<f64> {
    if tap_losses.is_empty() {
        if w != 0.0 {
            return Err(Error::config("nonzero loss weight without taps"));
        }
        return Ok(final_loss);
    }
    let sum: f64 = tap_losses.iter().sum();
    let mean = sum / tap_losses.len() as f64;
    Ok((1.0 - w) * final_loss + w * mean)
}

/// Records `combine_losses` on the tape.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, final_loss: NodeId, tap_losses: &[NodeId], w: f64) -> Result<NodeId> {
    let Some((&first, rest)) = tap_losses.split_first() else {
        if w != 0.0 {
            return Err(Error::config("nonzero loss weight without taps"));
        }
        return Ok(final_loss);
    };
    let mut sum = first;
    for &t in rest {
        sum = tape.add(sum, t)?;
    }
    let mean = tape.div_scalar(sum, T::lit(tap_losses.len() as f64))?;
    let a = tape.scale(final_loss, T::lit(1.0 - w))?;
    let b = tape.scale(mean, T::lit(w))?;
    tape.add(a, b)
}

/// Tape nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub final_log_probs: NodeId,
    /// `(layer, log_probs)` per tap, in tap order.
    pub taps: Vec<(usize, NodeId)>,
    /// Depth 0 (projected inputs) through the last layer.
    pub activations: Vec<NodeId>,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub final_posterior: CtcPosterior<f32>,
    pub tap_posteriors: Vec<CtcPosterior<f32>>,
    pub activations: Option<Vec<Tensor<f32>>>,
    /// `T'`: frames seen after the splice (or `T` without one).
    pub frames: usize,
}

/// Loss terms of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub final_loss: f64,
    pub tap_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SshrModel {
    cfg: SshrConfig,
    store: ParamStore,
    input_w: ParamId,
    input_b: ParamId,
    layers: Vec<EncoderLayer>,
    head_w: ParamId,
    head_b: ParamId,
}

impl SshrModel {
    /// Builds and initializes the post-surgery stack from `cfg.seed`.
    pub fn new(cfg: SshrConfig) -> Result<Self> {
        cfg.validate()?;
        let specs = build_stack(&cfg.stack, &cfg.cross_taps)?;
        let (h, v) = (cfg.stack.hidden, cfg.vocabulary.size());
        let mut store = ParamStore::new();
        let mut rng = stream_rng(cfg.seed, STREAM_INPUT);
        let input_w = store.add_glorot("input.w", cfg.input_dim, h, &mut rng);
        let input_b = store.add_filled("input.b", h, 0.0);
        let layers = specs
            .iter()
            .enumerate()
            .map(|(k, &spec)| EncoderLayer::init(&mut store, k + 1, spec, &cfg.stack, v, cfg.seed))
            .collect();
        let mut rng = stream_rng(cfg.seed, STREAM_HEAD);
        let head_w = store.add_glorot("head.w", h, v, &mut rng);
        let head_b = store.add_filled("head.b", v, 0.0);
        Ok(Self {
            cfg,
            store,
            input_w,
            input_b,
            layers,
            head_w,
            head_b,
        })
    }

    /// Builds `cfg`'s stack with layer weights taken from a trained, unmodified
    /// `base` of the same depth: kept and copied layers load the base layer they
    /// name, fresh layers and posterior query paths keep their seeded init, and
    /// the input projection and output head are copied.
    pub fn from_base(cfg: SshrConfig, base: &SshrModel) -> Result<Self> {
        let b = &base.cfg;
        if b.stack.surgery != Surgery::None || !b.cross_taps.is_empty() {
            return Err(Error::config("base model must have no surgery and no taps"));
        }
        if (b.stack.depth, b.stack.hidden, b.stack.heads, b.stack.ffn, b.input_dim)
            != (cfg.stack.depth, cfg.stack.hidden, cfg.stack.heads, cfg.stack.ffn, cfg.input_dim)
            || b.vocabulary != cfg.vocabulary
        {
            return Err(Error::config("base model dimensions or vocabulary differ"));
        }
        let mut m = Self::new(cfg)?;
        let copy = |dst: ParamId, src: ParamId, m: &mut Self| {
            let v = &base.store.get(src).values;
            m.store.get_mut(dst).values.copy_from_slice(v);
        };
        copy(m.input_w, base.input_w, &mut m);
        copy(m.input_b, base.input_b, &mut m);
        copy(m.head_w, base.head_w, &mut m);
        copy(m.head_b, base.head_b, &mut m);
        for k in 0..m.layers.len() {
            let src = match m.layers[k].spec.init {
                InitSource::Original(j) | InitSource::CopyOf(j) => &base.layers[j - 1],
                InitSource::FreshRandom => continue,
            };
            let mut pairs: Vec<(ParamId, ParamId)> = m.layers[k].shared_params().into_iter().zip(src.shared_params()).collect();
            if let (QueryProjection::Linear { w, b }, QueryProjection::Linear { w: sw, b: sb }) = (&m.layers[k].query, &src.query) {
                pairs.extend([(*w, *sw), (*b, *sb)]);
            }
            for (d, s) in pairs {
                copy(d, s, &mut m);
            }
        }
        Ok(m)
    }

    pub fn config(&self) -> &SshrConfig {
        &self.cfg
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.cfg.vocabulary
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn layer(&self, k: usize) -> &EncoderLayer {
        &self.layers[k - 1]
    }

    /// Frames after the splice for an input of `frames` rows.
    pub fn output_frames(&self, frames: usize) -> usize {
        frames + usize::from(self.cfg.lid_extract_layer.is_some())
    }

    /// Records the forward pass for a `T×F` feature matrix.
    pub fn forward_nodes<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, feats: NodeId) -> Result<ForwardNodes> {
        let (frames, width) = match tape.value(feats).shape() {
            [t, f] => (*t, *f),
            s => return Err(Error::config(format!("features must be T×F, got {s:?}"))),
        };
        if width != self.cfg.input_dim {
            return Err(Error::config(format!(
                "feature width {width} does not match input_dim {}",
                self.cfg.input_dim
            )));
        }
        if frames == 0 {
            return Err(Error::EmptyInput { op: "forward" });
        }
        let h = self.cfg.stack.hidden;
        let x = tape.linear(feats, p.get(self.input_w), p.get(self.input_b))?;
        let pos = sinusoidal_positions(frames, h).into_iter().map(T::lit).collect();
        let pos = tape.constant(vec![frames, h], pos)?;
        let mut x = tape.add(x, pos)?;

        let mut activations = vec![x];
        let mut taps = Vec::with_capacity(self.cfg.cross_taps.len());
        let mut pending: Option<NodeId> = None;
        for (k, layer) in self.layers.iter().enumerate() {
            let depth = k + 1;
            let at = |e: Error| e.at(format!("layer {depth}"));
            let out = match layer.spec.kind {
                LayerKind::SelfAttention => self_attention_layer(tape, layer, p, x).map_err(at)?,
                LayerKind::CrossAttention { .. } => {
                    let lp = pending.take().expect("tap posterior precedes its consumer");
                    cross_attention_layer(tape, layer, p, lp, x).map_err(at)?
                }
            };
            activations.push(out);
            x = out;
            if self.cfg.lid_extract_layer == Some(depth) {
                let frame = tape.mean_over_time(x).map_err(at)?;
                x = tape.prepend_row(frame, x).map_err(at)?;
            }
            if self.cfg.cross_taps.contains(&depth) {
                let lp = ctc_head(tape, x, p.get(self.head_w), p.get(self.head_b)).map_err(at)?;
                taps.push((depth, lp));
                pending = Some(lp);
            }
        }
        let final_log_probs = ctc_head(tape, x, p.get(self.head_w), p.get(self.head_b))
            .map_err(|e| e.at("final head"))?;
        Ok(ForwardNodes {
            final_log_probs,
            taps,
            activations,
            frames: tape.value(x).rows(),
        })
    }

    /// Inference pass in `f32` with optional retention of every activation.
    pub fn forward(&self, feats: &Tensor<f32>, retain: bool) -> Result<ForwardOutput> {
        let mut tape = Tape::<f32>::new();
        let p = self.store.bind(&mut tape, false)?;
        let input = tape.leaf(feats.clone());
        let nodes = self.forward_nodes(&mut tape, &p, input)?;
        let post = |layer, id| CtcPosterior {
            layer,
            log_probs: tape.value(id).clone(),
        };
        Ok(ForwardOutput {
            final_posterior: post(self.depth(), nodes.final_log_probs),
            tap_posteriors: nodes.taps.iter().map(|&(l, id)| post(l, id)).collect(),
            activations: retain.then(|| {
                nodes
                    .activations
                    .iter()
                    .map(|&id| tape.value(id).clone())
                    .collect()
            }),
            frames: nodes.frames,
        })
    }

    /// Records every CTC term and the combined loss for one utterance.
    pub fn loss_nodes<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        feats: NodeId,
        transcript: &[usize],
        lang: usize,
    ) -> Result<(NodeId, NodeId, Vec<NodeId>)> {
        let nodes = self.forward_nodes(tape, p, feats)?;
        let vocab = &self.cfg.vocabulary;
        let targets = make_targets(transcript, lang, vocab, self.cfg.lid_in_targets)?;
        let final_loss = ctc_loss_node(tape, nodes.final_log_probs, &targets).map_err(|e| e.at("final CTC"))?;
        let mut tap_losses = Vec::with_capacity(nodes.taps.len());
        for &(layer, lp) in &nodes.taps {
            let t = make_targets(transcript, lang, vocab, self.cfg.lid_targets_at(layer))?;
            tap_losses.push(ctc_loss_node(tape, lp, &t).map_err(|e| e.at(format!("tap {layer} CTC")))?);
        }
        let total = total_loss(tape, final_loss, &tap_losses, self.cfg.weight())?;
        Ok((total, final_loss, tap_losses))
    }

    /// Loss terms and the gradient of the combined loss for every parameter.
    pub fn loss_and_grads<T: Scalar>(
        &self,
        feats: &Tensor<f32>,
        transcript: &[usize],
        lang: usize,
    ) -> Result<(LossTerms, Vec<Vec<T>>)> {
        let mut tape = Tape::<T>::new();
        let p = self.store.bind(&mut tape, true)?;
        let input = tape.leaf(feats.cast());
        let (total, final_loss, taps) = self.loss_nodes(&mut tape, &p, input, transcript, lang)?;
        tape.backward_scalar(total)?;
        let scalar = |id: NodeId| tape.value(id).values()[0].as_f64();
        let terms = LossTerms {
            total: scalar(total),
            final_loss: scalar(final_loss),
            tap_losses: taps.iter().map(|&id| scalar(id)).collect(),
        };
        Ok((terms, self.store.collect_grads(&tape, &p)))
    }

    /// Writes the checkpoint: magic, length-prefixed canonical config JSON,
    /// then every parameter blob in declaration order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_string(&serde_json::to_value(self.cfg.resolved())?)?;
        let mut out = Vec::with_capacity(64 + json.len() + 4 * self.store.num_values());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for Param { name, shape, values } in self.store.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let len = r.u64()? as usize;
        let cfg: SshrConfig = serde_json::from_slice(r.take(len)?)?;
        let mut model = Self::new(cfg)?;
        let count = r.u32()? as usize;
        let mut loaded = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let values = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            loaded.add(name, shape, values);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        model.store.copy_values_from(&loaded)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub const CHECKPOINT_MAGIC: &[u8] = b"SSHR1";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
