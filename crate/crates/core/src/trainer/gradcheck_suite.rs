use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_head, ctc_loss_node, Vocabulary};
use crate::encoder::{
    cross_attention_layer, self_attention_layer, EncoderLayer, InitSource, LayerKind, LayerSpec, StackConfig, Surgery,
};
use crate::error::Result;
use crate::numcore::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::numcore::params::{Bound, ParamStore};
use crate::numcore::{random_tensor, NodeId, Tape, Tensor};
use crate::sshr_model::{SshrConfig, SshrModel};

type Build = dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + Send + Sync;

/// One named function with its inputs.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Build>,
}

impl GradCase {
    pub fn new<F>(name: impl Into<String>, inputs: Vec<Tensor<f64>>, build: F) -> Self
    where
        F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            inputs,
            build: Box::new(build),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReportEntry {
    pub name: String,
    pub worst_relative: f64,
    pub worst_absolute: f64,
    pub checked: usize,
    pub passed: bool,
    /// Set when the function itself failed to evaluate.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradReportEntry>,
}

impl GradReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> Vec<&GradReportEntry> {
        self.entries.iter().filter(|e| !e.passed).collect()
    }
}

/// Every differentiable op plus the layer, head and full-model composites.
pub fn gradcheck_suite(seed: u64) -> GradReport {
    gradcheck_suite_with(seed, Vec::new())
}

/// [`gradcheck_suite`] with extra cases appended.
pub fn gradcheck_suite_with(seed: u64, extra: Vec<GradCase>) -> GradReport {
    let mut cases = standard_cases(seed);
    cases.extend(extra);
    let entries = cases
        .iter()
        .map(|c| match check_gradients(&c.inputs, DEFAULT_STEP, &c.build) {
            Ok(r) => GradReportEntry {
                name: c.name.clone(),
                worst_relative: r.worst_relative,
                worst_absolute: r.worst_absolute,
                checked: r.checked,
                passed: r.passes(DEFAULT_TOLERANCE),
                error: None,
            },
            Err(e) => GradReportEntry {
                name: c.name.clone(),
                worst_relative: f64::NAN,
                worst_absolute: f64::NAN,
                checked: 0,
                passed: false,
                error: Some(e.to_string()),
            },
        })
        .collect();
    GradReport {
        seed,
        step: DEFAULT_STEP,
        tolerance: DEFAULT_TOLERANCE,
        entries,
    }
}

fn weighted(t: &mut Tape<f64>, y: NodeId, w: NodeId) -> Result<NodeId> {
    t.mul(y, w)
}

fn layer_case(name: &str, kind: LayerKind, rng: &mut ChaCha8Rng, seed: u64) -> GradCase {
    let cfg = StackConfig {
        depth: 2,
        hidden: 8,
        heads: 2,
        ffn: 12,
        surgery: Surgery::None,
    };
    let vocab = 5;
    let mut store = ParamStore::new();
    let spec = LayerSpec {
        kind,
        init: InitSource::Original(1),
    };
    let layer = EncoderLayer::init(&mut store, 2, spec, &cfg, vocab, seed);
    // Move layer-norm and bias parameters off their trivial starting values.
    let mut inputs: Vec<Tensor<f64>> = store
        .iter()
        .map(|p| {
            let r = random_tensor(rng, p.shape.clone());
            let v = p.values.iter().zip(r.values()).map(|(&a, &b)| a as f64 + 0.3 * b).collect();
            Tensor::new(p.shape.clone(), v).unwrap()
        })
        .collect();
    let n = inputs.len();
    inputs.push(random_tensor(rng, vec![5, 8]));
    inputs.push(random_tensor(rng, vec![5, vocab]));
    inputs.push(random_tensor(rng, vec![5, 8]));
    GradCase::new(name, inputs, move |t, ids| {
        let p = Bound::from_nodes(ids[..n].to_vec());
        let (x, logits, w) = (ids[n], ids[n + 1], ids[n + 2]);
        let y = match layer.spec.kind {
            LayerKind::SelfAttention => self_attention_layer(t, &layer, &p, x)?,
            LayerKind::CrossAttention { .. } => {
                let lp = t.log_softmax_rows(logits)?;
                cross_attention_layer(t, &layer, &p, lp, x)?
            }
        };
        weighted(t, y, w)
    })
}

fn model_case(seed: u64) -> GradCase {
    let vocabulary = Vocabulary::new(
        (0..4).map(|i| format!("p{i}")).collect(),
        vec!["<a>".into(), "<b>".into()],
    )
    .unwrap();
    let cfg = SshrConfig {
        stack: StackConfig {
            depth: 4,
            hidden: 8,
            heads: 2,
            ffn: 12,
            surgery: Surgery::ReplaceLastWithMiddle(1),
        },
        input_dim: 3,
        lid_extract_layer: Some(1),
        lid_in_targets: true,
        cross_taps: vec![1, 3],
        loss_weight: None,
        vocabulary,
        seed,
    };
    let model = SshrModel::new(cfg).expect("suite model config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut inputs: Vec<Tensor<f64>> = model
        .params()
        .iter()
        .map(|p| Tensor::new(p.shape.clone(), p.values.iter().map(|&v| v as f64).collect()).unwrap())
        .collect();
    let n = inputs.len();
    inputs.push(random_tensor(&mut rng, vec![7, 3]));
    GradCase::new("sshr_model_total_loss", inputs, move |t, ids| {
        let p = Bound::from_nodes(ids[..n].to_vec());
        Ok(model.loss_nodes(t, &p, ids[n], &[1, 3, 3, 2], 1)?.0)
    })
}

fn standard_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = |rng: &mut ChaCha8Rng, shape: &[usize]| random_tensor(rng, shape.to_vec());
    let (a, b, w34) = (r(&mut rng, &[3, 4]), r(&mut rng, &[4, 5]), r(&mut rng, &[3, 5]));
    let (x, y, w) = (r(&mut rng, &[3, 4]), r(&mut rng, &[3, 4]), r(&mut rng, &[3, 4]));
    let (row, gain, bias) = (r(&mut rng, &[4]), r(&mut rng, &[4]), r(&mut rng, &[4]));
    let first = r(&mut rng, &[1, 4]);
    let w44 = r(&mut rng, &[4, 4]);
    let (q, k, v, wa) = (r(&mut rng, &[3, 8]), r(&mut rng, &[5, 8]), r(&mut rng, &[5, 8]), r(&mut rng, &[3, 8]));
    let logits = r(&mut rng, &[6, 5]);
    let (hidden, hw, hb) = (r(&mut rng, &[6, 4]), r(&mut rng, &[4, 6]), r(&mut rng, &[6]));

    let mut cases = vec![
        GradCase::new("matmul", vec![a, b, w34], |t, i| {
            let o = t.matmul(i[0], i[1])?;
            weighted(t, o, i[2])
        }),
        GradCase::new("add", vec![x.clone(), y.clone(), w.clone()], |t, i| {
            let o = t.add(i[0], i[1])?;
            weighted(t, o, i[2])
        }),
        GradCase::new("mul", vec![x.clone(), y.clone()], |t, i| t.mul(i[0], i[1])),
        GradCase::new("add_row", vec![x.clone(), row.clone(), w.clone()], |t, i| {
            let o = t.add_row(i[0], i[1])?;
            weighted(t, o, i[2])
        }),
        GradCase::new("scale", vec![x.clone(), w.clone()], |t, i| {
            let o = t.scale(i[0], -1.3)?;
            weighted(t, o, i[1])
        }),
        GradCase::new("div_scalar", vec![x.clone(), w.clone()], |t, i| {
            let o = t.div_scalar(i[0], 3.0)?;
            weighted(t, o, i[1])
        }),
        GradCase::new("gelu", vec![x.clone(), w.clone()], |t, i| {
            let o = t.gelu(i[0])?;
            weighted(t, o, i[1])
        }),
        GradCase::new("exp", vec![x.clone(), w.clone()], |t, i| {
            let o = t.exp(i[0])?;
            weighted(t, o, i[1])
        }),
        GradCase::new("log_softmax_rows", vec![x.clone(), w.clone()], |t, i| {
            let o = t.log_softmax_rows(i[0])?;
            weighted(t, o, i[1])
        }),
        GradCase::new("layer_norm", vec![x.clone(), gain, bias, w.clone()], |t, i| {
            let o = t.layer_norm(i[0], i[1], i[2], 1e-5)?;
            weighted(t, o, i[3])
        }),
        GradCase::new("mean_over_time", vec![x.clone(), first.clone()], |t, i| {
            let o = t.mean_over_time(i[0])?;
            weighted(t, o, i[1])
        }),
        GradCase::new("prepend_row", vec![first, x.clone()], |t, i| {
            let o = t.prepend_row(i[0], i[1])?;
            t.mul(o, o)
        }),
        GradCase::new("attention", vec![q, k, v, wa], |t, i| {
            let o = t.attention(i[0], i[1], i[2], 2)?;
            weighted(t, o, i[3])
        }),
        GradCase::new("sum", vec![x.clone()], |t, i| {
            let sq = t.mul(i[0], i[0])?;
            t.sum(sq)
        }),
        GradCase::new("linear", vec![x, w44, row, w], |t, i| {
            let o = t.linear(i[0], i[1], i[2])?;
            weighted(t, o, i[3])
        }),
        GradCase::new("ctc_loss", vec![logits], |t, i| {
            let lp = t.log_softmax_rows(i[0])?;
            ctc_loss_node(t, lp, &[1, 2, 2])
        }),
        GradCase::new("ctc_head_and_loss", vec![hidden, hw, hb], |t, i| {
            let lp = ctc_head(t, i[0], i[1], i[2])?;
            ctc_loss_node(t, lp, &[3, 1, 4])
        }),
    ];
    cases.push(layer_case("self_attention_layer", LayerKind::SelfAttention, &mut rng, seed));
    cases.push(layer_case("cross_attention_layer", LayerKind::CrossAttention { tap: 1 }, &mut rng, seed));
    cases.push(model_case(seed));
    cases
}
