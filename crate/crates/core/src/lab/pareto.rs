use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::finetune::Method;
use crate::metrics::EpochReport;

/// One epoch of one run in the privacy/utility plane, copied from its report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub method: Method,
    /// Run label such as `lora_r16_a16`.
    pub label: String,
    pub epoch: usize,
    /// Sensitive-token loss on the training split.
    pub privacy: f64,
    /// Non-sensitive-token loss on the test split.
    pub utility_loss: f64,
    pub flops_cumulative: f64,
}

impl TradeoffPoint {
    pub fn from_report(report: &EpochReport) -> Result<Self> {
        Ok(TradeoffPoint {
            method: report.tag.method,
            label: report.tag.label(),
            epoch: report.epoch,
            privacy: report.train.sensitive.ok_or(LabError::NoTokens("sensitive training"))?,
            utility_loss: report.test.nonsensitive.ok_or(LabError::NoTokens("non-sensitive test"))?,
            flops_cumulative: report.flops_cumulative,
        })
    }

    /// At least as good on both axes and strictly better on one.
    pub fn dominates(&self, other: &TradeoffPoint) -> bool {
        self.privacy >= other.privacy
            && self.utility_loss <= other.utility_loss
            && (self.privacy > other.privacy || self.utility_loss < other.utility_loss)
    }
}

/// Among points with `privacy >= min_privacy`, the one with the lowest
/// utility loss. Ties go to higher privacy, then to the earlier epoch.
pub fn pareto_select(points: &[TradeoffPoint], min_privacy: f64) -> Result<TradeoffPoint> {
    if points.is_empty() {
        return Err(LabError::Config("no trade-off points to select from".into()));
    }
    points
        .iter()
        .filter(|p| p.privacy >= min_privacy)
        .min_by(|a, b| {
            a.utility_loss
                .total_cmp(&b.utility_loss)
                .then(b.privacy.total_cmp(&a.privacy))
                .then(a.epoch.cmp(&b.epoch))
        })
        .cloned()
        .ok_or(LabError::NoFeasibleCheckpoint(min_privacy))
}

/// Points no other point dominates, in input order.
pub fn pareto_front(points: &[TradeoffPoint]) -> Vec<TradeoffPoint> {
    points
        .iter()
        .filter(|p| !points.iter().any(|q| q.dominates(p)))
        .cloned()
        .collect()
}
