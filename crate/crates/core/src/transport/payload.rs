//! Payload codecs: tensors, named weight blobs and control messages.

use super::CodecError;
use crate::model::{ParamSet, Role};
use crate::task::TaskKind;
use crate::tensor::Tensor;

/// Appends `ndim u8 | dims u32 LE | data f32 LE`.
pub fn encode_tensor_into(t: &Tensor, out: &mut Vec<u8>) -> Result<(), CodecError> {
    let ndim =
        u8::try_from(t.ndim()).map_err(|_| CodecError::malformed("tensor rank exceeds 255"))?;
    out.reserve(1 + 4 * t.ndim() + 4 * t.numel());
    out.push(ndim);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| CodecError::malformed("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    encode_tensor_into(t, &mut out)?;
    Ok(out)
}

/// Byte length of an encoded tensor.
pub fn tensor_payload_len(t: &Tensor) -> usize {
    1 + 4 * t.ndim() + 4 * t.numel()
}

/// Sequential reader over a payload.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::malformed(format!(
                "payload truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    /// Reads the shape of a tensor payload, leaving the cursor at its data.
    pub fn tensor_shape(&mut self) -> Result<Vec<usize>, CodecError> {
        let ndim = self.u8()? as usize;
        if ndim == 0 {
            return Err(CodecError::malformed("tensor with rank 0"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = self.u32()? as usize;
            if d == 0 {
                return Err(CodecError::malformed("tensor with a zero dimension"));
            }
            shape.push(d);
        }
        Ok(shape)
    }

    pub fn tensor(&mut self) -> Result<Tensor, CodecError> {
        let shape = self.tensor_shape()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= self.remaining()))
            .ok_or_else(|| {
                CodecError::malformed(format!("tensor data for shape {shape:?} is truncated"))
            })?;
        let raw = self.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| CodecError::malformed(e.to_string()))
    }

    pub fn finish(&self) -> Result<(), CodecError> {
        if self.remaining() != 0 {
            return Err(CodecError::malformed(format!(
                "{} unexpected trailing bytes",
                self.remaining()
            )));
        }
        Ok(())
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, CodecError> {
    let mut r = Reader::new(bytes);
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

/// `count u32 | (name_len u16 | name | tensor)*` in parameter-set order.
pub fn encode_weights(set: &ParamSet) -> Result<Vec<u8>, CodecError> {
    encode_named(set.values())
}

pub fn encode_named<'a>(
    entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| CodecError::malformed("parameter name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor_into(t, &mut out)?;
    }
    Ok(out)
}

pub fn decode_named(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CodecError> {
    let mut r = Reader::new(bytes);
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CodecError::malformed("parameter name is not UTF-8"))?
            .to_owned();
        entries.push((name, r.tensor()?));
    }
    r.finish()?;
    Ok(entries)
}

/// Decodes a weight blob into a parameter set; the role is read from the name prefixes.
pub fn decode_weights(bytes: &[u8], task: Option<TaskKind>) -> Result<ParamSet, CodecError> {
    let entries = decode_named(bytes)?;
    let role = entries
        .first()
        .and_then(|(n, _)| Role::from_name(n))
        .ok_or_else(|| CodecError::malformed("weight blob has no role-prefixed entries"))?;
    ParamSet::from_entries(role, task, entries).map_err(|e| CodecError::malformed(e.to_string()))
}

/// Scalar elements carried by a tensor or weight-blob payload.
pub fn count_elements(msg: super::MsgType, payload: &[u8]) -> Result<u64, CodecError> {
    use super::MsgType::*;
    match msg {
        Feat | FeatGrad | BodyOut | BodyOutGrad => {
            let shape = Reader::new(payload).tensor_shape()?;
            Ok(shape.iter().map(|&d| d as u64).product())
        }
        Weights => {
            let mut r = Reader::new(payload);
            let count = r.u32()?;
            let mut total = 0u64;
            for _ in 0..count {
                let len = r.u16()? as usize;
                r.take(len)?;
                let shape = r.tensor_shape()?;
                let n: usize = shape.iter().product();
                r.take(4 * n)?;
                total += n as u64;
            }
            Ok(total)
        }
        Control => Ok(0),
    }
}

/// Session-control messages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Control {
    /// Client announces itself after connecting.
    Hello,
    /// Weight frames follow; `setup` marks the one-time initial distribution.
    Install {
        setup: bool,
    },
    /// Run one local step. Flags select which parts are trained.
    Step {
        train_head_tail: bool,
        train_body: bool,
    },
    /// Send local weights; `setup` marks the final collection.
    Upload {
        setup: bool,
    },
    /// Client's training loss for the round.
    Loss(f32),
    /// Discard the current round and restore the round-start state.
    Abort,
    Shutdown,
}

impl Control {
    pub fn encode(&self) -> Vec<u8> {
        match *self {
            Control::Hello => vec![1],
            Control::Install { setup } => vec![2, setup as u8],
            Control::Step {
                train_head_tail,
                train_body,
            } => vec![3, train_head_tail as u8 | (train_body as u8) << 1],
            Control::Upload { setup } => vec![4, setup as u8],
            Control::Loss(v) => {
                let mut out = vec![5];
                out.extend_from_slice(&v.to_le_bytes());
                out
            }
            Control::Abort => vec![6],
            Control::Shutdown => vec![7],
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let msg = match r.u8()? {
            1 => Control::Hello,
            2 => Control::Install {
                setup: r.u8()? != 0,
            },
            3 => {
                let flags = r.u8()?;
                Control::Step {
                    train_head_tail: flags & 1 != 0,
                    train_body: flags & 2 != 0,
                }
            }
            4 => Control::Upload {
                setup: r.u8()? != 0,
            },
            5 => Control::Loss(r.f32()?),
            6 => Control::Abort,
            7 => Control::Shutdown,
            other => {
                return Err(CodecError::malformed(format!(
                    "unknown control tag {other}"
                )))
            }
        };
        r.finish()?;
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_payload_length() {
        let t = Tensor::zeros(&[2, 3, 4]);
        let b = encode_tensor(&t).unwrap();
        assert_eq!(b.len(), 1 + 4 * 3 + 4 * 24);
        assert_eq!(b.len(), tensor_payload_len(&t));
        assert_eq!(decode_tensor(&b).unwrap(), t);
        assert!(decode_tensor(&b[..b.len() - 2]).is_err());
    }

    #[test]
    fn control_round_trip() {
        for c in [
            Control::Hello,
            Control::Install { setup: true },
            Control::Step {
                train_head_tail: false,
                train_body: true,
            },
            Control::Upload { setup: false },
            Control::Loss(0.125),
            Control::Abort,
            Control::Shutdown,
        ] {
            assert_eq!(Control::decode(&c.encode()).unwrap(), c);
        }
        assert!(Control::decode(&[99]).is_err());
        assert!(Control::decode(&[]).is_err());
    }

    #[test]
    fn weights_keep_order_and_role() {
        let mut set = ParamSet::new(Role::Tail, Some(TaskKind::Segmentation));
        set.insert("tail.z", Tensor::ones(&[2])).unwrap();
        set.insert("tail.a", Tensor::full(&[1, 3], -0.5)).unwrap();
        let bytes = encode_weights(&set).unwrap();
        assert_eq!(
            count_elements(super::super::MsgType::Weights, &bytes).unwrap(),
            5
        );
        let back = decode_weights(&bytes, Some(TaskKind::Segmentation)).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), ["tail.z", "tail.a"]);
        assert_eq!(back.fingerprint(), set.fingerprint());
        assert_eq!(back.role(), Role::Tail);
    }
}
