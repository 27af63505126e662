use super::CodecError;

pub const MAGIC: [u8; 4] = *b"FSTA";
pub const VERSION: u8 = 1;
/// magic(4) + version(1) + type(1) + round(4) + client(2) + task(1) + length(4)
pub const HEADER_LEN: usize = 17;
/// Upper bound on a single payload accepted from the wire.
pub const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    /// Head output sent to the body.
    Feat = 1,
    /// Gradient with respect to the head output.
    FeatGrad = 2,
    /// Body output sent to the tail.
    BodyOut = 3,
    /// Gradient with respect to the body output.
    BodyOutGrad = 4,
    Weights = 5,
    Control = 6,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => MsgType::Feat,
            2 => MsgType::FeatGrad,
            3 => MsgType::BodyOut,
            4 => MsgType::BodyOutGrad,
            5 => MsgType::Weights,
            6 => MsgType::Control,
            _ => return None,
        })
    }
}

/// One wire message with its routing header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub round: u32,
    pub client_id: u16,
    pub task_id: u8,
    pub payload: Vec<u8>,
}

/// Header fields parsed ahead of the payload, used by stream readers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub msg_type: MsgType,
    pub round: u32,
    pub client_id: u16,
    pub task_id: u8,
    pub payload_len: u32,
}

impl Frame {
    pub fn new(
        msg_type: MsgType,
        round: u32,
        client_id: u16,
        task_id: u8,
        payload: Vec<u8>,
    ) -> Self {
        Self {
            msg_type,
            round,
            client_id,
            task_id,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.push(self.task_id);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::malformed(format!(
                "truncated header: {} of {HEADER_LEN} bytes",
                bytes.len()
            )));
        }
        let header = Header::parse(bytes[..HEADER_LEN].try_into().expect("header slice"))?;
        let body = &bytes[HEADER_LEN..];
        let len = header.payload_len as usize;
        if body.len() < len {
            return Err(CodecError::malformed(format!(
                "truncated payload: {} of {len} bytes",
                body.len()
            )));
        }
        if body.len() > len {
            return Err(CodecError::malformed(format!(
                "{} trailing bytes after payload",
                body.len() - len
            )));
        }
        Ok(header.with_payload(body.to_vec()))
    }
}

impl Header {
    pub fn parse(bytes: &[u8; HEADER_LEN]) -> Result<Self, CodecError> {
        if bytes[..4] != MAGIC {
            return Err(CodecError::malformed(format!(
                "bad magic {:02x?}",
                &bytes[..4]
            )));
        }
        if bytes[4] != VERSION {
            return Err(CodecError::Version(bytes[4]));
        }
        let msg_type = MsgType::from_u8(bytes[5])
            .ok_or_else(|| CodecError::malformed(format!("unknown message type {}", bytes[5])))?;
        let round = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
        let client_id = u16::from_le_bytes(bytes[10..12].try_into().expect("2 bytes"));
        let task_id = bytes[12];
        if crate::TaskKind::from_id(task_id).is_none() {
            return Err(CodecError::malformed(format!("unknown task id {task_id}")));
        }
        let payload_len = u32::from_le_bytes(bytes[13..17].try_into().expect("4 bytes"));
        if payload_len > MAX_PAYLOAD {
            return Err(CodecError::malformed(format!(
                "payload length {payload_len} exceeds limit"
            )));
        }
        Ok(Self {
            msg_type,
            round,
            client_id,
            task_id,
            payload_len,
        })
    }

    pub fn with_payload(self, payload: Vec<u8>) -> Frame {
        Frame {
            msg_type: self.msg_type,
            round: self.round,
            client_id: self.client_id,
            task_id: self.task_id,
            payload,
        }
    }
}
