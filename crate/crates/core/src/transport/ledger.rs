//! Byte and element accounting for every frame crossing the split.

use std::fmt;
use std::io::Write;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::payload::count_elements;
use super::{Frame, MsgType, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::ClientToServer, Direction::ServerToClient];

    fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::ClientToServer => "client_to_server",
            Direction::ServerToClient => "server_to_client",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Feature,
    Gradient,
    Parameter,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Feature, Category::Gradient, Category::Parameter];

    fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Category::Feature => "feature",
            Category::Gradient => "gradient",
            Category::Parameter => "parameter",
        }
    }

    pub fn of(msg: MsgType) -> Option<Self> {
        match msg {
            MsgType::Feat | MsgType::BodyOut => Some(Category::Feature),
            MsgType::FeatGrad | MsgType::BodyOutGrad => Some(Category::Gradient),
            MsgType::Weights => Some(Category::Parameter),
            MsgType::Control => None,
        }
    }
}

/// Whether parameter traffic belongs to the steady-state training loop or to
/// one-time setup (initial distribution, final collection).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Traffic {
    Steady,
    Setup,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counter {
    pub elements: u64,
    /// Payload data bytes, always `4 × elements`.
    pub bytes: u64,
    pub frames: u64,
}

impl Counter {
    fn add(&mut self, elements: u64) {
        self.elements += elements;
        self.bytes += 4 * elements;
        self.frames += 1;
    }

    fn merge(&mut self, other: &Counter) {
        self.elements += other.elements;
        self.bytes += other.bytes;
        self.frames += other.frames;
    }

    fn minus(&self, other: &Counter) -> Counter {
        Counter {
            elements: self.elements - other.elements,
            bytes: self.bytes - other.bytes,
            frames: self.frames - other.frames,
        }
    }
}

/// Per-direction, per-category counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    steady: [[Counter; 3]; 2],
    setup: [Counter; 2],
    /// Header, shape-prefix and control bytes; excluded from the cost model.
    overhead_bytes: [u64; 2],
    control_frames: [u64; 2],
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        dir: Direction,
        frame: &Frame,
        traffic: Traffic,
    ) -> Result<(), TransportError> {
        let d = dir.index();
        let elements = count_elements(frame.msg_type, &frame.payload)?;
        match Category::of(frame.msg_type) {
            Some(Category::Parameter) if traffic == Traffic::Setup => self.setup[d].add(elements),
            Some(cat) => self.steady[d][cat.index()].add(elements),
            None => self.control_frames[d] += 1,
        }
        self.overhead_bytes[d] += frame.encoded_len() as u64 - 4 * elements;
        Ok(())
    }

    pub fn counter(&self, dir: Direction, cat: Category) -> Counter {
        self.steady[dir.index()][cat.index()]
    }

    pub fn setup(&self, dir: Direction) -> Counter {
        self.setup[dir.index()]
    }

    pub fn overhead_bytes(&self, dir: Direction) -> u64 {
        self.overhead_bytes[dir.index()]
    }

    pub fn control_frames(&self, dir: Direction) -> u64 {
        self.control_frames[dir.index()]
    }

    /// Steady-state elements of one category summed over both directions.
    pub fn category_elements(&self, cat: Category) -> u64 {
        Direction::ALL
            .iter()
            .map(|&d| self.counter(d, cat).elements)
            .sum()
    }

    pub fn steady_elements(&self) -> u64 {
        Category::ALL
            .iter()
            .map(|&c| self.category_elements(c))
            .sum()
    }

    /// Counters accumulated since `earlier`.
    pub fn since(&self, earlier: &CostLedger) -> CostLedger {
        let mut out = CostLedger::default();
        for d in 0..2 {
            for c in 0..3 {
                out.steady[d][c] = self.steady[d][c].minus(&earlier.steady[d][c]);
            }
            out.setup[d] = self.setup[d].minus(&earlier.setup[d]);
            out.overhead_bytes[d] = self.overhead_bytes[d] - earlier.overhead_bytes[d];
            out.control_frames[d] = self.control_frames[d] - earlier.control_frames[d];
        }
        out
    }

    /// Adds every counter of `other` into this ledger.
    pub fn absorb(&mut self, other: &CostLedger) {
        for d in 0..2 {
            for c in 0..3 {
                self.steady[d][c].merge(&other.steady[d][c]);
            }
            self.setup[d].merge(&other.setup[d]);
            self.overhead_bytes[d] += other.overhead_bytes[d];
            self.control_frames[d] += other.control_frames[d];
        }
    }

    /// CSV with columns `direction,category,elements,bytes,frames`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["direction", "category", "elements", "bytes", "frames"])?;
        for dir in Direction::ALL {
            for cat in Category::ALL {
                let c = self.counter(dir, cat);
                w.write_record([
                    dir.label(),
                    cat.label(),
                    &c.elements.to_string(),
                    &c.bytes.to_string(),
                    &c.frames.to_string(),
                ])?;
            }
            let s = self.setup(dir);
            w.write_record([
                dir.label(),
                "setup",
                &s.elements.to_string(),
                &s.bytes.to_string(),
                &s.frames.to_string(),
            ])?;
            w.write_record([
                dir.label(),
                "overhead",
                "0",
                &self.overhead_bytes(dir).to_string(),
                &self.control_frames(dir).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory CSV");
        String::from_utf8(buf).expect("ASCII CSV")
    }
}

impl fmt::Display for CostLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for dir in Direction::ALL {
            write!(f, "{}:", dir.label())?;
            for cat in Category::ALL {
                write!(f, " {}={}", cat.label(), self.counter(dir, cat).elements)?;
            }
            writeln!(f, " setup={}", self.setup(dir).elements)?;
        }
        Ok(())
    }
}

/// Thread-safe handle to a ledger shared by several links.
#[derive(Debug, Clone, Default)]
pub struct SharedLedger(Arc<Mutex<CostLedger>>);

impl SharedLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &self,
        dir: Direction,
        frame: &Frame,
        traffic: Traffic,
    ) -> Result<(), TransportError> {
        self.0
            .lock()
            .expect("ledger lock")
            .record(dir, frame, traffic)
    }

    pub fn snapshot(&self) -> CostLedger {
        self.0.lock().expect("ledger lock").clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::transport::payload::encode_tensor;

    #[test]
    fn bytes_are_four_per_element_and_headers_are_overhead() {
        let mut l = CostLedger::new();
        let payload = encode_tensor(&Tensor::zeros(&[2, 17, 32])).unwrap();
        let f = Frame::new(MsgType::Feat, 1, 0, 0, payload);
        l.record(Direction::ClientToServer, &f, Traffic::Steady)
            .unwrap();
        let c = l.counter(Direction::ClientToServer, Category::Feature);
        assert_eq!(c.elements, 2 * 17 * 32);
        assert_eq!(c.bytes, 4 * c.elements);
        assert_eq!(c.frames, 1);
        assert_eq!(l.overhead_bytes(Direction::ClientToServer), 17 + 1 + 12);
    }

    #[test]
    fn setup_weights_are_kept_apart() {
        let mut l = CostLedger::new();
        let mut set = crate::model::ParamSet::new(crate::model::Role::Head, None);
        set.insert("head.w", Tensor::zeros(&[3, 3])).unwrap();
        let f = Frame::new(
            MsgType::Weights,
            1,
            0,
            0,
            crate::transport::encode_weights(&set).unwrap(),
        );
        l.record(Direction::ServerToClient, &f, Traffic::Setup)
            .unwrap();
        assert_eq!(
            l.counter(Direction::ServerToClient, Category::Parameter)
                .elements,
            0
        );
        assert_eq!(l.setup(Direction::ServerToClient).elements, 9);
        let before = l.clone();
        l.record(Direction::ServerToClient, &f, Traffic::Steady)
            .unwrap();
        let delta = l.since(&before);
        assert_eq!(
            delta
                .counter(Direction::ServerToClient, Category::Parameter)
                .elements,
            9
        );
        assert_eq!(delta.setup(Direction::ServerToClient).elements, 0);
        assert!(l
            .to_csv_string()
            .starts_with("direction,category,elements,bytes,frames\n"));
    }
}
