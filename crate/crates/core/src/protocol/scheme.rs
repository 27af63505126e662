use serde::{Deserialize, Serialize};

use super::Phase;

/// Which parts train in a given round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scheme {
    /// Everything trains every round.
    OneStep,
    /// Joint training for `joint` rounds, then heads and tails only.
    TwoStep { joint: u32 },
    /// Blocks of `block` rounds; odd blocks freeze the body, even blocks freeze heads and tails.
    Alternating { block: u32 },
}

impl Scheme {
    /// `(train_head_tail, train_body)` for a 1-based round.
    pub fn flags(&self, round: u32) -> (bool, bool) {
        match *self {
            Scheme::OneStep => (true, true),
            Scheme::TwoStep { joint } => (true, round <= joint),
            Scheme::Alternating { block } => {
                let index = (round.max(1) - 1) / block.max(1) + 1;
                if index % 2 == 1 {
                    (true, false)
                } else {
                    (false, true)
                }
            }
        }
    }

    pub fn phase(&self, round: u32) -> Phase {
        match self.flags(round) {
            (true, true) => Phase::Joint,
            (true, false) => Phase::Finetune,
            (false, _) => Phase::BodyOnly,
        }
    }

    pub fn validate(&self, rounds: u32) -> Result<(), String> {
        match *self {
            Scheme::OneStep => Ok(()),
            Scheme::TwoStep { joint } if joint > rounds => {
                Err(format!("joint rounds {joint} exceed total rounds {rounds}"))
            }
            Scheme::TwoStep { .. } => Ok(()),
            Scheme::Alternating { block: 0 } => {
                Err("alternating block length must be positive".into())
            }
            Scheme::Alternating { .. } => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_freezes_body_after_joint_phase() {
        let s = Scheme::TwoStep { joint: 3 };
        assert_eq!(s.flags(3), (true, true));
        assert_eq!(s.flags(4), (true, false));
        assert_eq!(s.phase(4), Phase::Finetune);
        assert!(s.validate(2).is_err());
    }

    #[test]
    fn alternating_blocks() {
        let s = Scheme::Alternating { block: 2 };
        let flags: Vec<_> = (1..=6).map(|r| s.flags(r)).collect();
        assert_eq!(
            flags,
            vec![
                (true, false),
                (true, false),
                (false, true),
                (false, true),
                (true, false),
                (true, false)
            ]
        );
        assert!(Scheme::Alternating { block: 0 }.validate(10).is_err());
    }
}
