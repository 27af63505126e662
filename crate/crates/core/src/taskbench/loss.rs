//! Task losses built on the autodiff graph so their gradients flow back through the tail.

use super::Label;
use crate::task::TaskKind;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

pub const SEG_DICE_EPS: f32 = 1e-6;
const FOCAL_GAMMA_TWO_ALPHA: f32 = 0.25;

fn label_error(op: &'static str, reason: String) -> TensorError {
    TensorError::InvalidArgument { op, reason }
}

fn row_const(g: &mut Graph, values: Vec<f32>) -> Result<Var> {
    let n = values.len();
    Ok(g.constant(Tensor::new(vec![1, n], values)?))
}

/// `(log p, log(1 - p), p, 1 - p)` for `p = sigmoid(logits)`.
fn sigmoid_parts(g: &mut Graph, logits: Var) -> Result<(Var, Var, Var, Var)> {
    let p = g.sigmoid(logits)?;
    let neg = g.scale(logits, -1.0)?;
    let q = g.sigmoid(neg)?;
    Ok((g.log(p)?, g.log(q)?, p, q))
}

/// Mean binary cross-entropy against 0/1 targets.
fn bce(g: &mut Graph, logp: Var, logq: Var, y: &[f32]) -> Result<Var> {
    let yv = row_const(g, y.to_vec())?;
    let ny = row_const(g, y.iter().map(|v| 1.0 - v).collect())?;
    let a = g.mul(yv, logp)?;
    let b = g.mul(ny, logq)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    g.scale(m, -1.0)
}

/// Mean focal loss with gamma 2 and alpha 0.25.
fn focal(g: &mut Graph, parts: (Var, Var, Var, Var), y: &[f32]) -> Result<Var> {
    let (logp, logq, p, q) = parts;
    let alpha = FOCAL_GAMMA_TWO_ALPHA;
    let wpos = row_const(g, y.iter().map(|v| alpha * v).collect())?;
    let wneg = row_const(g, y.iter().map(|v| (1.0 - alpha) * (1.0 - v)).collect())?;
    let q2 = g.square(q)?;
    let p2 = g.square(p)?;
    let pos = g.mul(q2, logp)?;
    let pos = g.mul(wpos, pos)?;
    let neg = g.mul(p2, logq)?;
    let neg = g.mul(wneg, neg)?;
    let s = g.add(pos, neg)?;
    let m = g.mean(s)?;
    g.scale(m, -1.0)
}

/// Softmax cross-entropy of `[1, C]` logits.
pub fn loss_classification(g: &mut Graph, logits: Var, class: usize) -> Result<Var> {
    let n = g.value(logits).numel();
    if class >= n {
        return Err(label_error(
            "loss_classification",
            format!("class {class} out of {n}"),
        ));
    }
    let row = g.reshape(logits, &[1, n])?;
    let ls = g.log_softmax(row)?;
    let mut onehot = vec![0.0; n];
    onehot[class] = 1.0;
    let oh = row_const(g, onehot)?;
    let picked = g.mul(oh, ls)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0)
}

/// Binary cross-entropy plus soft Dice plus focal, weighted equally.
pub fn loss_segmentation(g: &mut Graph, logits: Var, mask: &[u8]) -> Result<Var> {
    let n = g.value(logits).numel();
    if mask.len() != n {
        return Err(label_error(
            "loss_segmentation",
            format!("mask has {} entries, logits {n}", mask.len()),
        ));
    }
    let row = g.reshape(logits, &[1, n])?;
    let y: Vec<f32> = mask.iter().map(|&m| f32::from(m.min(1))).collect();
    let parts = sigmoid_parts(g, row)?;
    let b = bce(g, parts.0, parts.1, &y)?;
    let f = focal(g, parts, &y)?;

    let p = parts.2;
    let yv = row_const(g, y.clone())?;
    let py = g.mul(p, yv)?;
    let inter = g.sum(py)?;
    let num = g.scale(inter, 2.0)?;
    let sp = g.sum(p)?;
    let denom = g.add_scalar(sp, y.iter().sum::<f32>() + SEG_DICE_EPS)?;
    let inv = g.recip(denom)?;
    let ratio = g.mul(num, inv)?;
    let neg = g.scale(ratio, -1.0)?;
    let dice = g.add_scalar(neg, 1.0)?;

    let bf = g.add(b, f)?;
    g.add(bf, dice)
}

/// Objectness BCE plus focal objectness plus smooth-L1 box regression on `[bbox.., objectness]`.
pub fn loss_detection(g: &mut Graph, pred: Var, bbox: [f32; 4], objectness: u8) -> Result<Var> {
    let n = g.value(pred).numel();
    if n != 5 {
        return Err(label_error(
            "loss_detection",
            format!("expected 5 outputs, got {n}"),
        ));
    }
    let row = g.reshape(pred, &[1, 5])?;
    let logit = g.slice_cols(row, 4, 1)?;
    let y = [f32::from(objectness.min(1))];
    let parts = sigmoid_parts(g, logit)?;
    let b = bce(g, parts.0, parts.1, &y)?;
    let f = focal(g, parts, &y)?;
    let obj = g.add(b, f)?;
    if objectness == 0 {
        return Ok(obj);
    }
    let boxes = g.slice_cols(row, 0, 4)?;
    let target = row_const(g, bbox.to_vec())?;
    let diff = g.sub(boxes, target)?;
    let sl = g.smooth_l1(diff)?;
    let reg = g.mean(sl)?;
    g.add(obj, reg)
}

/// Dispatches to the loss matching `label`'s task.
pub fn task_loss(g: &mut Graph, task: TaskKind, out: Var, label: &Label) -> Result<Var> {
    match (task, label) {
        (TaskKind::Classification, Label::Class(c)) => loss_classification(g, out, *c),
        (TaskKind::Segmentation, Label::Mask(m)) => loss_segmentation(g, out, m),
        (TaskKind::Detection, Label::Box { bbox, objectness }) => {
            loss_detection(g, out, *bbox, *objectness)
        }
        _ => Err(label_error(
            "task_loss",
            format!("label does not belong to {task}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(values: Vec<f32>, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> f32 {
        let mut g = Graph::new();
        let n = values.len();
        let x = g.param(Tensor::new(vec![1, n], values).unwrap());
        let l = f(&mut g, x).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn uniform_logits_give_ln3() {
        let l = eval(vec![0.5; 3], |g, x| loss_classification(g, x, 1));
        assert!((l - 3f32.ln()).abs() < 1e-6);
        assert!(eval(vec![0.0, 40.0, 0.0], |g, x| loss_classification(g, x, 1)) < 1e-6);
    }

    #[test]
    fn confident_segmentation_is_near_zero() {
        let mask = [1, 1, 0, 0, 1, 0, 0, 0];
        let logits = mask
            .iter()
            .map(|&m| if m == 1 { 12.0 } else { -12.0 })
            .collect();
        assert!(eval(logits, |g, x| loss_segmentation(g, x, &mask)) < 0.01);
        let empty = eval(vec![0.0; 8], |g, x| loss_segmentation(g, x, &[0; 8]));
        assert!(empty.is_finite() && empty > 0.0);
    }

    #[test]
    fn detection_masks_box_terms() {
        let bbox = [0.25, 0.5, 0.5, 0.25];
        assert!(
            eval(vec![0.25, 0.5, 0.5, 0.25, 12.0], |g, x| loss_detection(
                g, x, bbox, 1
            )) < 0.01
        );
        let a = eval(vec![9.0, -3.0, 2.0, 7.0, -1.0], |g, x| {
            loss_detection(g, x, bbox, 0)
        });
        let b = eval(vec![0.0, 0.0, 0.0, 0.0, -1.0], |g, x| {
            loss_detection(g, x, bbox, 0)
        });
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_label_kind_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 3]));
        assert!(task_loss(&mut g, TaskKind::Detection, x, &Label::Class(0)).is_err());
    }
}
