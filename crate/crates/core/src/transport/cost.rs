//! Closed-form communication cost per averaging period and its reconciliation
//! against a measured [`CostLedger`].
//!
//! Convention: `F` and `G` are the feature and gradient elements crossing the
//! split in one round, summed over both directions (in this protocol each
//! direction carries half of each). Parameters travel once up and once down
//! per averaging event. The bidirectional total per client is therefore
//!
//! ```text
//! FL:     2 (Ph + Pb + Pt)
//! SL:     k (F + G)
//! FeSTA:  k (F + G) + 2 (Ph + Pt)
//! ```
//!
//! and each direction carries exactly half of it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ledger::{Category, CostLedger, Direction};
use crate::model::BodyConfig;
use crate::task::TaskKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("unknown strategy `{0}` (expected fl, sl or festa)")]
    UnknownStrategy(String),
    #[error("invalid cost input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostStrategy {
    Fl,
    Sl,
    Festa,
}

impl CostStrategy {
    pub const ALL: [CostStrategy; 3] = [CostStrategy::Fl, CostStrategy::Sl, CostStrategy::Festa];

    pub fn label(self) -> &'static str {
        match self {
            CostStrategy::Fl => "Federated learning",
            CostStrategy::Sl => "Split learning",
            CostStrategy::Festa => "FeSTA",
        }
    }
}

impl FromStr for CostStrategy {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fl" => Ok(CostStrategy::Fl),
            "sl" => Ok(CostStrategy::Sl),
            "festa" => Ok(CostStrategy::Festa),
            _ => Err(CostError::UnknownStrategy(s.to_owned())),
        }
    }
}

/// Inputs of the cost formulas. Units are caller-defined (millions for the
/// reference inventory, raw element counts for toy runs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelInput {
    pub ph: f64,
    pub pb: f64,
    pub pt: f64,
    pub f: f64,
    pub g: f64,
    /// Rounds per averaging period.
    pub k: u32,
}

impl CostModelInput {
    pub fn validate(&self) -> Result<(), CostError> {
        for (name, v) in [
            ("Ph", self.ph),
            ("Pb", self.pb),
            ("Pt", self.pt),
            ("F", self.f),
            ("G", self.g),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CostError::InvalidInput(format!(
                    "{name} = {v} must be finite and non-negative"
                )));
            }
        }
        if self.k == 0 {
            return Err(CostError::InvalidInput("k must be at least 1".into()));
        }
        Ok(())
    }

    /// Per-round feature and gradient counts for a split at `cfg` with `batch`
    /// samples per client: each direction carries one `(P+1)×D` block per sample.
    pub fn split_traffic(cfg: &BodyConfig, batch: usize) -> (f64, f64) {
        let block = (batch * cfg.block_rows() * cfg.hidden) as f64;
        (2.0 * block, 2.0 * block)
    }
}

/// Parameter inventory (millions) of the full-size sub-networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inventory {
    pub task: TaskKind,
    pub head: f64,
    pub body: f64,
    pub tail: f64,
}

pub const REFERENCE_INVENTORY: [Inventory; 3] = [
    Inventory {
        task: TaskKind::Classification,
        head: 13.313,
        body: 66.367,
        tail: 0.002,
    },
    Inventory {
        task: TaskKind::Segmentation,
        head: 15.041,
        body: 66.367,
        tail: 7.387,
    },
    Inventory {
        task: TaskKind::Detection,
        head: 27.085,
        body: 66.367,
        tail: 19.773,
    },
];

/// Feature (and gradient) elements per round at full scale, in millions:
/// two samples of a 257×768 block.
pub const REFERENCE_FEATURE_MILLIONS: f64 = 2.0 * 257.0 * 768.0 / 1e6;

impl Inventory {
    pub fn for_task(task: TaskKind) -> Inventory {
        REFERENCE_INVENTORY
            .into_iter()
            .find(|i| i.task == task)
            .expect("every task has an inventory")
    }

    /// Inputs for one averaging period of `k` rounds at full scale.
    pub fn cost_input(&self, k: u32) -> CostModelInput {
        CostModelInput {
            ph: self.head,
            pb: self.body,
            pt: self.tail,
            f: REFERENCE_FEATURE_MILLIONS,
            g: REFERENCE_FEATURE_MILLIONS,
            k,
        }
    }
}

/// Bidirectional cost split by column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub feature_gradient: f64,
    pub parameters: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.feature_gradient + self.parameters
    }
}

/// Bidirectional per-client cost over one averaging period.
pub fn closed_form_cost(
    strategy: CostStrategy,
    input: &CostModelInput,
) -> Result<CostBreakdown, CostError> {
    input.validate()?;
    let k = f64::from(input.k);
    let fg = k * (input.f + input.g);
    Ok(match strategy {
        CostStrategy::Fl => CostBreakdown {
            feature_gradient: 0.0,
            parameters: 2.0 * (input.ph + input.pb + input.pt),
        },
        CostStrategy::Sl => CostBreakdown {
            feature_gradient: fg,
            parameters: 0.0,
        },
        CostStrategy::Festa => CostBreakdown {
            feature_gradient: fg,
            parameters: 2.0 * (input.ph + input.pt),
        },
    })
}

/// Expected elements per direction and category: half of each bidirectional column.
pub fn per_direction(
    strategy: CostStrategy,
    input: &CostModelInput,
    dir: Direction,
    cat: Category,
) -> Result<f64, CostError> {
    let _ = dir;
    let total = closed_form_cost(strategy, input)?;
    let k = f64::from(input.k);
    Ok(match cat {
        Category::Feature if total.feature_gradient > 0.0 => k * input.f / 2.0,
        Category::Gradient if total.feature_gradient > 0.0 => k * input.g / 2.0,
        Category::Parameter => total.parameters / 2.0,
        _ => 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconciliationRow {
    pub direction: Direction,
    pub category: Category,
    pub measured: u64,
    pub expected: f64,
}

impl ReconciliationRow {
    pub fn matches(&self) -> bool {
        self.measured as f64 == self.expected
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconciliation {
    pub rows: Vec<ReconciliationRow>,
}

impl Reconciliation {
    pub fn is_exact(&self) -> bool {
        self.rows.iter().all(ReconciliationRow::matches)
    }

    pub fn discrepancies(&self) -> impl Iterator<Item = &ReconciliationRow> {
        self.rows.iter().filter(|r| !r.matches())
    }
}

impl fmt::Display for Reconciliation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(
                f,
                "{:<17} {:<9} measured={:<12} expected={:<14} {}",
                r.direction.label(),
                r.category.label(),
                r.measured,
                r.expected,
                if r.matches() { "ok" } else { "MISMATCH" }
            )?;
        }
        Ok(())
    }
}

/// Compares steady-state ledger totals (payload elements only) with the
/// closed-form model summed over `clients`.
pub fn ledger_vs_model(
    ledger: &CostLedger,
    strategy: CostStrategy,
    clients: &[CostModelInput],
) -> Result<Reconciliation, CostError> {
    let mut rows = Vec::new();
    for dir in Direction::ALL {
        for cat in Category::ALL {
            let mut expected = 0.0;
            for input in clients {
                expected += per_direction(strategy, input, dir, cat)?;
            }
            rows.push(ReconciliationRow {
                direction: dir,
                category: cat,
                measured: ledger.counter(dir, cat).elements,
                expected,
            });
        }
    }
    Ok(Reconciliation { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_feature_count() {
        assert!((REFERENCE_FEATURE_MILLIONS - 0.394752).abs() < 1e-12);
        let (f, g) = CostModelInput::split_traffic(&BodyConfig::full_scale(), 1);
        assert_eq!((f, g), (394_752.0, 394_752.0));
    }

    #[test]
    fn classification_rows() {
        let input = Inventory::for_task(TaskKind::Classification).cost_input(100);
        let fl = closed_form_cost(CostStrategy::Fl, &input).unwrap();
        assert!((fl.total() - 159.364).abs() < 1e-9);
        let sl = closed_form_cost(CostStrategy::Sl, &input).unwrap();
        assert!((sl.total() - 78.9504).abs() < 1e-9);
        let festa = closed_form_cost(CostStrategy::Festa, &input).unwrap();
        assert!((festa.parameters - 26.630).abs() < 1e-9);
    }

    #[test]
    fn invalid_inputs_and_strategy_names() {
        let mut input = Inventory::for_task(TaskKind::Detection).cost_input(100);
        input.k = 0;
        assert!(closed_form_cost(CostStrategy::Fl, &input).is_err());
        input.k = 1;
        input.f = -1.0;
        assert!(closed_form_cost(CostStrategy::Sl, &input).is_err());
        assert!("gossip".parse::<CostStrategy>().is_err());
        assert_eq!(
            "FeSTA".parse::<CostStrategy>().unwrap(),
            CostStrategy::Festa
        );
    }

    #[test]
    fn directions_split_the_total_evenly() {
        for task in TaskKind::ALL {
            let input = Inventory::for_task(task).cost_input(100);
            for s in CostStrategy::ALL {
                let total = closed_form_cost(s, &input).unwrap().total();
                let mut sum = 0.0;
                for d in Direction::ALL {
                    for c in Category::ALL {
                        sum += per_direction(s, &input, d, c).unwrap();
                    }
                }
                assert!((sum - total).abs() < 1e-9);
            }
        }
    }
}
