//! Flat binary dataset files: `task u8 | n u32 | feature shape | n × (features, label)`,
//! with features and labels stored as wire tensor payloads.

use std::fs;
use std::path::Path;

use super::{DataError, Label, Sample};
use crate::task::TaskKind;
use crate::tensor::Tensor;
use crate::transport::payload::{encode_tensor_into, Reader};
use crate::transport::CodecError;

fn label_tensor(label: &Label) -> Tensor {
    let data: Vec<f32> = match label {
        Label::Class(c) => vec![*c as f32],
        Label::Mask(m) => m.iter().map(|&v| f32::from(v)).collect(),
        Label::Box { bbox, objectness } => {
            let mut v = bbox.to_vec();
            v.push(f32::from(*objectness));
            v
        }
    };
    let n = data.len();
    Tensor::new(vec![n], data).expect("non-empty label")
}

fn as_u8(v: f32, what: &str) -> Result<u8, DataError> {
    if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
        return Err(
            CodecError::malformed(format!("{what} value {v} is not a small integer")).into(),
        );
    }
    Ok(v as u8)
}

fn parse_label(task: TaskKind, t: &Tensor) -> Result<Label, DataError> {
    let d = t.data();
    Ok(match task {
        TaskKind::Classification => Label::Class(usize::from(as_u8(d[0], "class")?)),
        TaskKind::Segmentation => Label::Mask(
            d.iter()
                .map(|&v| as_u8(v, "mask"))
                .collect::<Result<_, _>>()?,
        ),
        TaskKind::Detection => {
            if d.len() != 5 {
                return Err(CodecError::malformed("box label needs 5 values").into());
            }
            Label::Box {
                bbox: [d[0], d[1], d[2], d[3]],
                objectness: as_u8(d[4], "objectness")?,
            }
        }
    })
}

pub fn write_dataset(samples: &[Sample]) -> Result<Vec<u8>, DataError> {
    let first = samples
        .first()
        .ok_or_else(|| DataError::Invalid("cannot write an empty dataset".into()))?;
    let task = first.task();
    let n =
        u32::try_from(samples.len()).map_err(|_| DataError::Invalid("too many samples".into()))?;
    let mut out = vec![task.id()];
    out.extend_from_slice(&n.to_le_bytes());
    out.push(first.features.ndim() as u8);
    for &d in first.features.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in samples {
        if s.task() != task || s.features.shape() != first.features.shape() {
            return Err(DataError::Invalid(
                "dataset mixes tasks or feature shapes".into(),
            ));
        }
        encode_tensor_into(&s.features, &mut out)?;
        encode_tensor_into(&label_tensor(&s.label), &mut out)?;
    }
    Ok(out)
}

pub fn read_dataset(bytes: &[u8]) -> Result<Vec<Sample>, DataError> {
    let mut r = Reader::new(bytes);
    let task =
        TaskKind::from_id(r.u8()?).ok_or_else(|| CodecError::malformed("unknown task id"))?;
    let n = r.u32()? as usize;
    let shape = r.tensor_shape()?;
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let features = r.tensor()?;
        if features.shape() != shape.as_slice() {
            return Err(CodecError::malformed(format!(
                "sample shape {:?} differs from header {shape:?}",
                features.shape()
            ))
            .into());
        }
        let label = parse_label(task, &r.tensor()?)?;
        samples.push(Sample { features, label });
    }
    r.finish()?;
    Ok(samples)
}

pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<(), DataError> {
    fs::write(path, write_dataset(samples)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>, DataError> {
    read_dataset(&fs::read(path)?)
}
