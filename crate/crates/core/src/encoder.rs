//! Pre-norm transformer encoder layers, the posterior-query cross-attention
//! variant, and final-layer surgery on a stack description.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::params::{Bound, ParamId, ParamStore};
use crate::numcore::{NodeId, Scalar, Tape};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// What happens to the last `n` layers of the base stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Surgery {
    #[default]
    None,
    DeleteLast(usize),
    ReplaceLastWithMiddle(usize),
    RandomInitLast(usize),
}

impl Surgery {
    pub fn n(self) -> usize {
        match self {
            Surgery::None => 0,
            Surgery::DeleteLast(n) | Surgery::ReplaceLastWithMiddle(n) | Surgery::RandomInitLast(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    /// Depth of the base stack before surgery.
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub surgery: Surgery,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            hidden: 32,
            heads: 4,
            ffn: 128,
            surgery: Surgery::None,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return Err(Error::config("stack dimensions must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        let n = self.surgery.n();
        if n >= self.depth {
            return Err(Error::config(format!(
                "surgery n={n} must be below depth {}",
                self.depth
            )));
        }
        if matches!(self.surgery, Surgery::ReplaceLastWithMiddle(_)) && 2 * n > self.depth {
            return Err(Error::config(format!(
                "replacing the last {n} layers needs {n} layers before them"
            )));
        }
        Ok(())
    }

    /// Number of layers left after surgery.
    pub fn surviving_depth(&self) -> usize {
        match self.surgery {
            Surgery::DeleteLast(n) => self.depth - n,
            _ => self.depth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    SelfAttention,
    /// Queries come from the CTC posteriors of layer `tap`; keys and values from its output.
    CrossAttention { tap: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    /// Keeps base layer `k` (1-based).
    Original(usize),
    /// Starts from a copy of base layer `k`.
    CopyOf(usize),
    FreshRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub init: InitSource,
}

/// Lays out the post-surgery stack and marks the layer after each tap as cross-attention.
///
/// Taps are 1-based indices into the surviving stack and must leave room for
/// the layer that consumes them.
pub fn build_stack(cfg: &StackConfig, cross_taps: &[usize]) -> Result<Vec<LayerSpec>> {
    cfg.validate()?;
    let depth = cfg.depth;
    let inits: Vec<InitSource> = match cfg.surgery {
        Surgery::None => (1..=depth).map(InitSource::Original).collect(),
        Surgery::DeleteLast(n) => (1..=depth - n).map(InitSource::Original).collect(),
        Surgery::ReplaceLastWithMiddle(n) => (1..=depth - n)
            .map(InitSource::Original)
            .chain((depth - 2 * n + 1..=depth - n).map(InitSource::CopyOf))
            .collect(),
        Surgery::RandomInitLast(n) => (1..=depth - n)
            .map(InitSource::Original)
            .chain((0..n).map(|_| InitSource::FreshRandom))
            .collect(),
    };
    let mut specs: Vec<LayerSpec> = inits
        .into_iter()
        .map(|init| LayerSpec {
            kind: LayerKind::SelfAttention,
            init,
        })
        .collect();

    let surviving = specs.len();
    for (i, &tap) in cross_taps.iter().enumerate() {
        if i > 0 && tap <= cross_taps[i - 1] {
            return Err(Error::config(format!(
                "cross taps must be strictly increasing: {cross_taps:?}"
            )));
        }
        if tap == 0 || tap >= surviving {
            return Err(Error::config(format!(
                "cross tap {tap} is outside 1..{} for a surviving depth of {surviving}",
                surviving - 1
            )));
        }
        specs[tap].kind = LayerKind::CrossAttention { tap };
    }
    Ok(specs)
}

/// Seeded stream for one named block of parameters.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) const STREAM_BASE_LAYER: u64 = 100;
pub(crate) const STREAM_FRESH_LAYER: u64 = 10_000;
pub(crate) const STREAM_QUERY_PATH: u64 = 20_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryProjection {
    Linear { w: ParamId, b: ParamId },
    /// Two stacked linears over the posterior simplex: V→H→H.
    Posterior {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayer {
    pub spec: LayerSpec,
    pub heads: usize,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub query: QueryProjection,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

impl EncoderLayer {
    /// Registers the parameters of the layer at 1-based `position`.
    ///
    /// Everything except a cross-attention query path is drawn from the
    /// stream of the layer named by `spec.init`, so an `Original(k)` and a
    /// `CopyOf(k)` layer start bitwise identical.
    pub fn init(
        store: &mut ParamStore,
        position: usize,
        spec: LayerSpec,
        cfg: &StackConfig,
        vocab_size: usize,
        seed: u64,
    ) -> Self {
        let h = cfg.hidden;
        let mut rng = match spec.init {
            InitSource::Original(k) | InitSource::CopyOf(k) => {
                stream_rng(seed, STREAM_BASE_LAYER + k as u64)
            }
            InitSource::FreshRandom => stream_rng(seed, STREAM_FRESH_LAYER + position as u64),
        };
        let p = format!("layer{position}");
        let ln1_gain = store.add_filled(format!("{p}.ln1.gain"), h, 1.0);
        let ln1_bias = store.add_filled(format!("{p}.ln1.bias"), h, 0.0);
        // Always draw the self-attention query weight so later draws line up.
        let wq_values = {
            let mut scratch = ParamStore::new();
            let id = scratch.add_glorot("wq", h, h, &mut rng);
            scratch.get(id).values.clone()
        };
        let query = match spec.kind {
            LayerKind::SelfAttention => QueryProjection::Linear {
                w: store.add(format!("{p}.attn.wq"), vec![h, h], wq_values),
                b: store.add_filled(format!("{p}.attn.bq"), h, 0.0),
            },
            LayerKind::CrossAttention { .. } => {
                let mut qrng = stream_rng(seed, STREAM_QUERY_PATH + position as u64);
                QueryProjection::Posterior {
                    w1: store.add_glorot(format!("{p}.cross.wq1"), vocab_size, h, &mut qrng),
                    b1: store.add_filled(format!("{p}.cross.bq1"), h, 0.0),
                    w2: store.add_glorot(format!("{p}.cross.wq2"), h, h, &mut qrng),
                    b2: store.add_filled(format!("{p}.cross.bq2"), h, 0.0),
                }
            }
        };
        let wk = store.add_glorot(format!("{p}.attn.wk"), h, h, &mut rng);
        let bk = store.add_filled(format!("{p}.attn.bk"), h, 0.0);
        let wv = store.add_glorot(format!("{p}.attn.wv"), h, h, &mut rng);
        let bv = store.add_filled(format!("{p}.attn.bv"), h, 0.0);
        let wo = store.add_glorot(format!("{p}.attn.wo"), h, h, &mut rng);
        let bo = store.add_filled(format!("{p}.attn.bo"), h, 0.0);
        let ln2_gain = store.add_filled(format!("{p}.ln2.gain"), h, 1.0);
        let ln2_bias = store.add_filled(format!("{p}.ln2.bias"), h, 0.0);
        let ffn_w1 = store.add_glorot(format!("{p}.ffn.w1"), h, cfg.ffn, &mut rng);
        let ffn_b1 = store.add_filled(format!("{p}.ffn.b1"), cfg.ffn, 0.0);
        let ffn_w2 = store.add_glorot(format!("{p}.ffn.w2"), cfg.ffn, h, &mut rng);
        let ffn_b2 = store.add_filled(format!("{p}.ffn.b2"), h, 0.0);
        Self {
            spec,
            heads: cfg.heads,
            ln1_gain,
            ln1_bias,
            query,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_gain,
            ln2_bias,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
        }
    }

    /// Parameter ids shared by both layer kinds (everything but the query path).
    pub fn shared_params(&self) -> [ParamId; 14] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln2_gain,
            self.ln2_bias,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
        ]
    }
}

fn ffn_block<T: Scalar>(tape: &mut Tape<T>, layer: &EncoderLayer, p: &Bound, x: NodeId) -> Result<NodeId> {
    let eps = T::lit(LAYER_NORM_EPS);
    let h = tape.layer_norm(x, p.get(layer.ln2_gain), p.get(layer.ln2_bias), eps)?;
    let a = tape.linear(h, p.get(layer.ffn_w1), p.get(layer.ffn_b1))?;
    let a = tape.gelu(a)?;
    let f = tape.linear(a, p.get(layer.ffn_w2), p.get(layer.ffn_b2))?;
    tape.add(x, f)
}

/// `x + MHA(LN(x))`, then `+ FFN(LN(·))`.
pub fn self_attention_layer<T: Scalar>(
    tape: &mut Tape<T>,
    layer: &EncoderLayer,
    p: &Bound,
    x: NodeId,
) -> Result<NodeId> {
    let QueryProjection::Linear { w: wq, b: bq } = layer.query else {
        return Err(Error::config("self_attention_layer on a cross-attention layer"));
    };
    let eps = T::lit(LAYER_NORM_EPS);
    let h = tape.layer_norm(x, p.get(layer.ln1_gain), p.get(layer.ln1_bias), eps)?;
    let q = tape.linear(h, p.get(wq), p.get(bq))?;
    let k = tape.linear(h, p.get(layer.wk), p.get(layer.bk))?;
    let v = tape.linear(h, p.get(layer.wv), p.get(layer.bv))?;
    let a = tape.attention(q, k, v, layer.heads)?;
    let o = tape.linear(a, p.get(layer.wo), p.get(layer.bo))?;
    let x1 = tape.add(x, o)?;
    ffn_block(tape, layer, p, x1)
}

/// Cross-attention whose queries are two stacked linears of the tap
/// posteriors `exp(log_probs)`, with keys/values from `x_tap`; the residual
/// path carries `x_tap`.
pub fn cross_attention_layer<T: Scalar>(
    tape: &mut Tape<T>,
    layer: &EncoderLayer,
    p: &Bound,
    log_probs: NodeId,
    x_tap: NodeId,
) -> Result<NodeId> {
    let QueryProjection::Posterior { w1, b1, w2, b2 } = layer.query else {
        return Err(Error::config("cross_attention_layer on a self-attention layer"));
    };
    let (tp, tx) = (tape.value(log_probs).rows(), tape.value(x_tap).rows());
    if tp != tx {
        return Err(Error::config(format!(
            "posterior length {tp} differs from representation length {tx}"
        )));
    }
    let eps = T::lit(LAYER_NORM_EPS);
    let probs = tape.exp(log_probs)?;
    let q = tape.linear(probs, p.get(w1), p.get(b1))?;
    let q = tape.linear(q, p.get(w2), p.get(b2))?;
    let h = tape.layer_norm(x_tap, p.get(layer.ln1_gain), p.get(layer.ln1_bias), eps)?;
    let k = tape.linear(h, p.get(layer.wk), p.get(layer.bk))?;
    let v = tape.linear(h, p.get(layer.wv), p.get(layer.bv))?;
    let a = tape.attention(q, k, v, layer.heads)?;
    let o = tape.linear(a, p.get(layer.wo), p.get(layer.bo))?;
    let x1 = tape.add(x_tap, o)?;
    ffn_block(tape, layer, p, x1)
}

/// Fixed sinusoidal position table, `frames × width`.
pub fn sinusoidal_positions(frames: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; frames * width];
    for t in 0..frames {
        for i in (0..width).step_by(2) {
            let freq = 1.0 / 10_000f64.powf(i as f64 / width as f64);
            out[t * width + i] = (t as f64 * freq).sin();
            if i + 1 < width {
                out[t * width + i + 1] = (t as f64 * freq).cos();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{ctc_head, ctc_loss_node};
    use crate::numcore::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
    use crate::numcore::{random_tensor, Tensor};

    fn stack(depth: usize, surgery: Surgery) -> StackConfig {
        StackConfig {
            depth,
            hidden: 8,
            heads: 2,
            ffn: 16,
            surgery,
        }
    }

    #[test]
    fn delete_last_three_of_24() {
        let specs = build_stack(&stack(24, Surgery::DeleteLast(3)), &[]).unwrap();
        assert_eq!(specs.len(), 21);
        assert!(specs
            .iter()
            .enumerate()
            .all(|(i, s)| s.init == InitSource::Original(i + 1) && s.kind == LayerKind::SelfAttention));
    }

    #[test]
    fn replace_last_three_of_24_with_middle_copies() {
        let specs = build_stack(&stack(24, Surgery::ReplaceLastWithMiddle(3)), &[]).unwrap();
        let inits: Vec<InitSource> = specs.iter().map(|s| s.init).collect();
        let mut expected: Vec<InitSource> = (1..=21).map(InitSource::Original).collect();
        expected.extend([19, 20, 21].map(InitSource::CopyOf));
        assert_eq!(inits, expected);
    }

    #[test]
    fn random_init_and_identity_stacks() {
        let specs = build_stack(&stack(24, Surgery::RandomInitLast(3)), &[]).unwrap();
        assert_eq!(specs.len(), 24);
        assert!(specs[21..].iter().all(|s| s.init == InitSource::FreshRandom));
        let plain = build_stack(&stack(6, Surgery::None), &[]).unwrap();
        assert_eq!(plain.len(), 6);
        assert!(plain.iter().all(|s| s.kind == LayerKind::SelfAttention));
    }

    #[test]
    fn taps_mark_the_following_layer() {
        let specs = build_stack(&stack(8, Surgery::None), &[5, 7]).unwrap();
        assert_eq!(specs[5].kind, LayerKind::CrossAttention { tap: 5 });
        assert_eq!(specs[7].kind, LayerKind::CrossAttention { tap: 7 });
        assert_eq!(specs[6].kind, LayerKind::SelfAttention);
    }

    #[test]
    fn invalid_stacks_are_config_errors() {
        let cases: Vec<(StackConfig, Vec<usize>)> = vec![
            (stack(8, Surgery::DeleteLast(1)), vec![7]),
            (stack(8, Surgery::None), vec![0]),
            (stack(8, Surgery::None), vec![5, 5]),
            (stack(8, Surgery::None), vec![6, 4]),
            (stack(4, Surgery::DeleteLast(4)), vec![]),
            (stack(4, Surgery::ReplaceLastWithMiddle(3)), vec![]),
            (
                StackConfig {
                    heads: 3,
                    ..stack(4, Surgery::None)
                },
                vec![],
            ),
        ];
        for (cfg, taps) in cases {
            assert!(
                matches!(build_stack(&cfg, &taps), Err(Error::Config(_))),
                "{cfg:?} {taps:?}"
            );
        }
    }

    fn one_layer(kind: LayerKind, vocab: usize) -> (ParamStore, EncoderLayer) {
        let cfg = stack(2, Surgery::None);
        let mut store = ParamStore::new();
        let spec = LayerSpec {
            kind,
            init: InitSource::Original(2),
        };
        let layer = EncoderLayer::init(&mut store, 2, spec, &cfg, vocab, 9);
        // perturb LN and bias params away from their trivial init
        let mut rng = stream_rng(1, 1);
        for p in store.iter_mut() {
            let r = random_tensor(&mut rng, p.shape.clone());
            for (v, d) in p.values.iter_mut().zip(r.values()) {
                *v += 0.3 * *d as f32;
            }
        }
        (store, layer)
    }

    fn as_inputs(store: &ParamStore) -> Vec<Tensor<f64>> {
        store
            .iter()
            .map(|p| {
                Tensor::new(p.shape.clone(), p.values.iter().map(|&v| v as f64).collect()).unwrap()
            })
            .collect()
    }

    fn rebind(ids: &[NodeId]) -> Bound {
        Bound::from_nodes(ids.to_vec())
    }

    #[test]
    fn self_attention_preserves_shape() {
        let (store, layer) = one_layer(LayerKind::SelfAttention, 5);
        for frames in [1, 4, 9] {
            let mut tape = Tape::<f64>::new();
            let p = store.bind(&mut tape, false).unwrap();
            let x = tape.leaf(random_tensor(&mut stream_rng(2, frames as u64), vec![frames, 8]));
            let y = self_attention_layer(&mut tape, &layer, &p, x).unwrap();
            assert_eq!(tape.value(y).shape(), &[frames, 8]);
        }
    }

    #[test]
    fn single_frame_attention_is_value_path() {
        let cfg = StackConfig {
            heads: 1,
            ..stack(2, Surgery::None)
        };
        let mut store = ParamStore::new();
        let spec = LayerSpec {
            kind: LayerKind::SelfAttention,
            init: InitSource::Original(1),
        };
        let layer = EncoderLayer::init(&mut store, 1, spec, &cfg, 5, 3);
        let mut tape = Tape::<f64>::new();
        let p = store.bind(&mut tape, false).unwrap();
        let x = tape.leaf(random_tensor(&mut stream_rng(3, 0), vec![1, 8]));
        let y = self_attention_layer(&mut tape, &layer, &p, x).unwrap();

        // the same computation with attention replaced by its value input
        let g = p.get(layer.ln1_gain);
        let b = p.get(layer.ln1_bias);
        let h = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
        let v = tape.linear(h, p.get(layer.wv), p.get(layer.bv)).unwrap();
        let o = tape.linear(v, p.get(layer.wo), p.get(layer.bo)).unwrap();
        let x1 = tape.add(x, o).unwrap();
        let expected = ffn_block(&mut tape, &layer, &p, x1).unwrap();
        for (a, e) in tape.value(y).values().iter().zip(tape.value(expected).values()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_identity_projections_single_frame() {
        let cfg = StackConfig {
            heads: 1,
            hidden: 4,
            ffn: 8,
            ..stack(2, Surgery::None)
        };
        let mut store = ParamStore::new();
        let spec = LayerSpec {
            kind: LayerKind::CrossAttention { tap: 1 },
            init: InitSource::Original(2),
        };
        let layer = EncoderLayer::init(&mut store, 2, spec, &cfg, 4, 3);
        let eye: Vec<f32> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let QueryProjection::Posterior { w1, w2, .. } = layer.query else {
            unreachable!()
        };
        for id in [w1, w2, layer.wk, layer.wv, layer.wo] {
            store.get_mut(id).values.clone_from(&eye);
        }
        let mut tape = Tape::<f64>::new();
        let p = store.bind(&mut tape, false).unwrap();
        let lp = tape.constant(vec![1, 4], vec![0.25f64.ln(); 4]).unwrap();
        let x = tape.constant(vec![1, 4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let y = cross_attention_layer(&mut tape, &layer, &p, lp, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4]);

        // weight 1 on the only key: output = x + LN(x) + FFN path
        let h = tape.layer_norm(x, p.get(layer.ln1_gain), p.get(layer.ln1_bias), LAYER_NORM_EPS).unwrap();
        let x1 = tape.add(x, h).unwrap();
        let expected = ffn_block(&mut tape, &layer, &p, x1).unwrap();
        for (a, e) in tape.value(y).values().iter().zip(tape.value(expected).values()) {
            assert!((a - e).abs() < 1e-12);
        }

        let short = tape.constant(vec![2, 4], vec![0.25f64.ln(); 8]).unwrap();
        assert!(cross_attention_layer(&mut tape, &layer, &p, short, x).is_err());
    }

    #[test]
    fn self_attention_layer_gradcheck() {
        let (store, layer) = one_layer(LayerKind::SelfAttention, 5);
        let mut inputs = as_inputs(&store);
        let n = inputs.len();
        inputs.push(random_tensor(&mut stream_rng(4, 0), vec![3, 8]));
        inputs.push(random_tensor(&mut stream_rng(4, 1), vec![3, 8]));
        let r = check_gradients(&inputs, DEFAULT_STEP, |t, ids| {
            let p = rebind(&ids[..n]);
            let y = self_attention_layer(t, &layer, &p, ids[n])?;
            t.mul(y, ids[n + 1])
        })
        .unwrap();
        assert!(r.passes(DEFAULT_TOLERANCE), "{r:?}");
    }

    #[test]
    fn posterior_receives_gradient_through_cross_attention() {
        // micro-stack: tap posterior -> cross layer -> head -> CTC
        let vocab = 5;
        let (mut store, layer) = one_layer(LayerKind::CrossAttention { tap: 1 }, vocab);
        let mut rng = stream_rng(5, 0);
        let hw = store.add_glorot("head.w", 8, vocab, &mut rng);
        let hb = store.add_filled("head.b", vocab, 0.0);
        let mut inputs = as_inputs(&store);
        let n = inputs.len();
        inputs.push(random_tensor(&mut rng, vec![4, vocab])); // tap logits
        inputs.push(random_tensor(&mut rng, vec![4, 8])); // x_tap
        let build = |t: &mut Tape<f64>, ids: &[NodeId]| -> Result<NodeId> {
            let p = rebind(&ids[..n]);
            let lp = t.log_softmax_rows(ids[n])?;
            let y = cross_attention_layer(t, &layer, &p, lp, ids[n + 1])?;
            let out = ctc_head(t, y, p.get(hw), p.get(hb))?;
            ctc_loss_node(t, out, &[1, 2])
        };
        let r = check_gradients(&inputs, DEFAULT_STEP, build).unwrap();
        assert!(r.passes(DEFAULT_TOLERANCE), "{r:?}");

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| tape.leaf(x.clone().with_grad())).collect();
        let loss = build(&mut tape, &ids).unwrap();
        tape.backward_scalar(loss).unwrap();
        let g = tape.grad(ids[n]).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>() > 1e-12);
    }

    #[test]
    fn copies_start_bitwise_identical() {
        let cfg = stack(6, Surgery::ReplaceLastWithMiddle(2));
        let specs = build_stack(&cfg, &[]).unwrap();
        let mut store = ParamStore::new();
        let layers: Vec<EncoderLayer> = specs
            .iter()
            .enumerate()
            .map(|(i, &s)| EncoderLayer::init(&mut store, i + 1, s, &cfg, 5, 21))
            .collect();
        for m in 1..=2 {
            let (a, b) = (&layers[6 - 4 + m - 1], &layers[6 - 2 + m - 1]);
            for (pa, pb) in a.shared_params().iter().zip(b.shared_params()) {
                assert_eq!(store.get(*pa).values, store.get(pb).values);
            }
        }
    }
}
