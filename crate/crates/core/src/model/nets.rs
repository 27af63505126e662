//! Toy head / transformer body / tail networks that honour the split-boundary
//! feature contract: every head emits a `(P+1)×D` block with CLS at row 0.

use super::{BodyConfig, FeatureBlock, Initializer, ModelError, ModelSpec, ParamSet, Role};
use crate::model::params::Bound;
use crate::task::TaskKind;
use crate::tensor::{Graph, Tensor, Var};

/// Task-specific client-side encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    task: TaskKind,
    cfg: BodyConfig,
    input_dim: usize,
    hidden: usize,
}

/// Shared pre-norm transformer encoder living on the server.
#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    cfg: BodyConfig,
    positional: bool,
}

/// Task-specific client-side decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Tail {
    task: TaskKind,
    cfg: BodyConfig,
    classes: usize,
}

/// Plain-value model output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    ClassLogits(Vec<f32>),
    MaskLogits(Vec<f32>),
    Box { bbox: [f32; 4], objectness: f32 },
}

pub fn build_head(
    task: TaskKind,
    spec: &ModelSpec,
    input_dim: usize,
    init: &mut Initializer,
) -> Result<(ParamSet, Head), ModelError> {
    let expected = match task {
        TaskKind::Classification => spec.sample_dim,
        TaskKind::Segmentation | TaskKind::Detection => spec.patch_dim,
    };
    if input_dim != expected {
        return Err(ModelError::Dimension {
            what: "head input",
            expected: vec![expected],
            got: vec![input_dim],
        });
    }
    let cfg = spec.body;
    let d = cfg.hidden;
    let mut set = ParamSet::new(Role::Head, Some(task));
    match task {
        TaskKind::Classification => {
            let m = spec.head_hidden;
            set.insert("head.fc1.w", init.trunc_normal(&[input_dim, m]))?;
            set.insert("head.fc1.b", Tensor::zeros(&[m]))?;
            set.insert("head.token_bank.w", init.trunc_normal(&[m, cfg.tokens * d]))?;
            set.insert("head.token_bank.b", Tensor::zeros(&[cfg.tokens * d]))?;
        }
        TaskKind::Segmentation | TaskKind::Detection => {
            set.insert("head.patch.w", init.trunc_normal(&[input_dim, d]))?;
            set.insert("head.patch.b", Tensor::zeros(&[d]))?;
        }
    }
    set.insert("head.cls", init.trunc_normal(&[1, d]))?;
    let head = Head {
        task,
        cfg,
        input_dim,
        hidden: spec.head_hidden,
    };
    Ok((set, head))
}

pub fn build_body(
    spec: &ModelSpec,
    init: &mut Initializer,
) -> Result<(ParamSet, Body), ModelError> {
    let cfg = spec.body;
    cfg.validate()?;
    let d = cfg.hidden;
    let f = cfg.mlp_hidden();
    let mut set = ParamSet::new(Role::Body, None);
    if spec.positional {
        set.insert("body.pos", init.trunc_normal(&[cfg.tokens, d]))?;
    }
    for l in 0..cfg.layers {
        let p = |s: &str| format!("body.layer{l}.{s}");
        set.insert(p("ln1.g"), Tensor::ones(&[d]))?;
        set.insert(p("ln1.b"), Tensor::zeros(&[d]))?;
        for w in ["q", "k", "v", "o"] {
            set.insert(p(&format!("attn.w{w}")), init.trunc_normal(&[d, d]))?;
            set.insert(p(&format!("attn.b{w}")), Tensor::zeros(&[d]))?;
        }
        set.insert(p("ln2.g"), Tensor::ones(&[d]))?;
        set.insert(p("ln2.b"), Tensor::zeros(&[d]))?;
        set.insert(p("mlp.w1"), init.trunc_normal(&[d, f]))?;
        set.insert(p("mlp.b1"), Tensor::zeros(&[f]))?;
        set.insert(p("mlp.w2"), init.trunc_normal(&[f, d]))?;
        set.insert(p("mlp.b2"), Tensor::zeros(&[d]))?;
    }
    Ok((
        set,
        Body {
            cfg,
            positional: spec.positional,
        },
    ))
}

pub fn build_tail(
    task: TaskKind,
    spec: &ModelSpec,
    init: &mut Initializer,
) -> Result<(ParamSet, Tail), ModelError> {
    let cfg = spec.body;
    let d = cfg.hidden;
    let mut set = ParamSet::new(Role::Tail, Some(task));
    set.insert("tail.ln.g", Tensor::ones(&[d]))?;
    set.insert("tail.ln.b", Tensor::zeros(&[d]))?;
    match task {
        TaskKind::Classification => {
            set.insert("tail.fc.w", init.trunc_normal(&[d, spec.classes]))?;
            set.insert("tail.fc.b", Tensor::zeros(&[spec.classes]))?;
        }
        TaskKind::Segmentation => {
            set.insert("tail.fc.w", init.trunc_normal(&[d, 1]))?;
            set.insert("tail.fc.b", Tensor::zeros(&[1]))?;
        }
        TaskKind::Detection => {
            set.insert("tail.fc.w", init.trunc_normal(&[cfg.tokens * d, 5]))?;
            set.insert("tail.fc.b", Tensor::zeros(&[5]))?;
        }
    }
    Ok((
        set,
        Tail {
            task,
            cfg,
            classes: spec.classes,
        },
    ))
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

impl Head {
    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Shape a raw sample must have: `[1, d]` for classification, `[P, patch]` otherwise.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.task {
            TaskKind::Classification => vec![1, self.input_dim],
            _ => vec![self.cfg.tokens, self.input_dim],
        }
    }

    /// Encodes one sample into a `(P+1)×D` token block.
    pub fn forward(&self, g: &mut Graph, p: &Bound, sample: &Tensor) -> Result<Var, ModelError> {
        let mut sample = sample.clone();
        if self.task == TaskKind::Classification && sample.ndim() == 1 {
            sample = sample.reshape(&[1, sample.numel()])?;
        }
        if sample.shape() != self.sample_shape() {
            return Err(ModelError::Dimension {
                what: "head sample",
                expected: self.sample_shape(),
                got: sample.shape().to_vec(),
            });
        }
        let x = g.constant(sample);
        let tokens = match self.task {
            TaskKind::Classification => {
                let z = linear(g, x, p.var("head.fc1.w"), p.var("head.fc1.b"))?;
                let z = g.gelu(z)?;
                let t = linear(g, z, p.var("head.token_bank.w"), p.var("head.token_bank.b"))?;
                g.reshape(t, &[self.cfg.tokens, self.cfg.hidden])?
            }
            TaskKind::Segmentation | TaskKind::Detection => {
                linear(g, x, p.var("head.patch.w"), p.var("head.patch.b"))?
            }
        };
        Ok(g.concat_rows(&[p.var("head.cls"), tokens])?)
    }

    /// Forward without gradient bookkeeping.
    pub fn features(&self, params: &ParamSet, sample: &Tensor) -> Result<FeatureBlock, ModelError> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let out = self.forward(&mut g, &bound, sample)?;
        FeatureBlock::new(g.value(out).clone(), &self.cfg)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

impl Body {
    pub fn config(&self) -> &BodyConfig {
        &self.cfg
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, block: Var) -> Result<Var, ModelError> {
        self.forward_traced(g, p, block, None)
    }

    /// As [`Body::forward`], additionally collecting every attention
    /// probability matrix into `attn`.
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        p: &Bound,
        block: Var,
        mut attn: Option<&mut Vec<Var>>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.cfg;
        let expected = [cfg.block_rows(), cfg.hidden];
        if g.value(block).shape() != expected {
            return Err(ModelError::Dimension {
                what: "body input",
                expected: expected.to_vec(),
                got: g.value(block).shape().to_vec(),
            });
        }
        let mut x = block;
        if self.positional {
            let cls = g.slice_rows(x, 0, 1)?;
            let rest = g.slice_rows(x, 1, cfg.tokens)?;
            let rest = g.add(rest, p.var("body.pos"))?;
            x = g.concat_rows(&[cls, rest])?;
        }
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        for l in 0..cfg.layers {
            let v = |s: &str| p.var(&format!("body.layer{l}.{s}"));
            let h = g.layernorm(x, v("ln1.g"), v("ln1.b"))?;
            let q = linear(g, h, v("attn.wq"), v("attn.bq"))?;
            let k = linear(g, h, v("attn.wk"), v("attn.bk"))?;
            let val = linear(g, h, v("attn.wv"), v("attn.bv"))?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for i in 0..cfg.heads {
                let qh = g.slice_cols(q, i * dh, dh)?;
                let kh = g.slice_cols(k, i * dh, dh)?;
                let vh = g.slice_cols(val, i * dh, dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale)?;
                let probs = g.softmax(scores, 1)?;
                if let Some(a) = attn.as_deref_mut() {
                    a.push(probs);
                }
                heads.push(g.matmul(probs, vh)?);
            }
            let merged = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            };
            let o = linear(g, merged, v("attn.wo"), v("attn.bo"))?;
            x = g.add(x, o)?;
            let h2 = g.layernorm(x, v("ln2.g"), v("ln2.b"))?;
            let m = linear(g, h2, v("mlp.w1"), v("mlp.b1"))?;
            let m = g.gelu(m)?;
            let m = linear(g, m, v("mlp.w2"), v("mlp.b2"))?;
            x = g.add(x, m)?;
        }
        Ok(x)
    }

    pub fn transform(
        &self,
        params: &ParamSet,
        block: &FeatureBlock,
    ) -> Result<FeatureBlock, ModelError> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(block.tensor().clone());
        let out = self.forward(&mut g, &bound, x)?;
        FeatureBlock::new(g.value(out).clone(), &self.cfg)
    }
}

impl Tail {
    pub fn task(&self) -> TaskKind {
        self.task
    }

    /// Classification reads only the CLS row; dense tasks read only rows `1..=P`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, block: Var) -> Result<Var, ModelError> {
        let cfg = &self.cfg;
        let expected = [cfg.block_rows(), cfg.hidden];
        if g.value(block).shape() != expected {
            return Err(ModelError::Dimension {
                what: "tail input",
                expected: expected.to_vec(),
                got: g.value(block).shape().to_vec(),
            });
        }
        match self.task {
            TaskKind::Classification => {
                let cls = g.slice_rows(block, 0, 1)?;
                let h = g.layernorm(cls, p.var("tail.ln.g"), p.var("tail.ln.b"))?;
                linear(g, h, p.var("tail.fc.w"), p.var("tail.fc.b"))
            }
            TaskKind::Segmentation => {
                let rows = g.slice_rows(block, 1, cfg.tokens)?;
                let h = g.layernorm(rows, p.var("tail.ln.g"), p.var("tail.ln.b"))?;
                let logits = linear(g, h, p.var("tail.fc.w"), p.var("tail.fc.b"))?;
                Ok(g.reshape(logits, &[1, cfg.tokens])?)
            }
            TaskKind::Detection => {
                let rows = g.slice_rows(block, 1, cfg.tokens)?;
                let h = g.layernorm(rows, p.var("tail.ln.g"), p.var("tail.ln.b"))?;
                let flat = g.reshape(h, &[1, cfg.tokens * cfg.hidden])?;
                linear(g, flat, p.var("tail.fc.w"), p.var("tail.fc.b"))
            }
        }
    }

    pub fn output_len(&self) -> usize {
        match self.task {
            TaskKind::Classification => self.classes,
            TaskKind::Segmentation => self.cfg.tokens,
            TaskKind::Detection => 5,
        }
    }

    pub fn decode(&self, raw: &Tensor) -> Prediction {
        let d = raw.data();
        match self.task {
            TaskKind::Classification => Prediction::ClassLogits(d.to_vec()),
            TaskKind::Segmentation => Prediction::MaskLogits(d.to_vec()),
            TaskKind::Detection => Prediction::Box {
                bbox: [d[0], d[1], d[2], d[3]],
                objectness: d[4],
            },
        }
    }

    pub fn predict(
        &self,
        params: &ParamSet,
        block: &FeatureBlock,
    ) -> Result<Prediction, ModelError> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(block.tensor().clone());
        let out = self.forward(&mut g, &bound, x)?;
        Ok(self.decode(g.value(out)))
    }
}

/// Head → body → tail on one sample, values only.
pub fn predict_composed(
    head: (&Head, &ParamSet),
    body: (&Body, &ParamSet),
    tail: (&Tail, &ParamSet),
    sample: &Tensor,
) -> Result<Prediction, ModelError> {
    let h = head.0.features(head.1, sample)?;
    let b = body.0.transform(body.1, &h)?;
    tail.0.predict(tail.1, &b)
}
