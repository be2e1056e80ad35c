//! Serialized run outputs with provenance for exact replay.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::estimator::{
    branching_ratio, combine_total_uncertainty, detection_efficiency, format_measurement, Bounded, CountRecord, Estimate,
};
use crate::sequence::{BatchResult, Diagnostics, Fidelity};
use crate::systematics::ErrorBudget;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub cycles: u64,
    #[serde(rename = "N_b")]
    pub n_b: u64,
    #[serde(rename = "N_r")]
    pub n_r: u64,
    #[serde(rename = "N_b_B")]
    pub n_b_bg: u64,
    #[serde(rename = "N_r_B")]
    pub n_r_bg: u64,
    pub seed: u64,
    pub params_hash: String,
    pub fidelity: Fidelity,
    pub windows: [f64; 4],
    pub diagnostics: Diagnostics,
}

impl BatchReport {
    pub fn new(result: &BatchResult, seed: u64, params_hash: &str, fidelity: Fidelity) -> Self {
        let r = &result.record;
        BatchReport {
            cycles: r.cycles,
            n_b: r.n_b,
            n_r: r.n_r,
            n_b_bg: r.n_b_bg,
            n_r_bg: r.n_r_bg,
            seed,
            params_hash: params_hash.to_string(),
            fidelity,
            windows: r.windows,
            diagnostics: result.diagnostics.clone(),
        }
    }

    pub fn record(&self) -> CountRecord {
        CountRecord { windows: self.windows, ..CountRecord::new(self.cycles, self.n_b, self.n_r, self.n_b_bg, self.n_r_bg) }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub cycles: u64,
    pub p: f64,
    pub sigma_stat: f64,
    pub p_display: String,
    pub branching_ratio: Bounded,
    pub branching_ratio_display: String,
    pub efficiency: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total: Option<Bounded>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_display: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget_hash: Option<String>,
}

impl EstimateReport {
    pub fn new(rec: &CountRecord, est: &Estimate, budget: Option<&ErrorBudget>) -> Result<Self, crate::estimator::EstimatorError> {
        let stat = Bounded::symmetric(est.p, est.sigma_stat);
        let total = budget.map(|b| combine_total_uncertainty(est.p, est.sigma_stat, Some(b)));
        let br = branching_ratio(total.as_ref().unwrap_or(&stat))?;
        Ok(EstimateReport {
            cycles: rec.cycles,
            p: est.p,
            sigma_stat: est.sigma_stat,
            p_display: format_measurement(&stat),
            branching_ratio_display: format_measurement(&br),
            branching_ratio: br,
            efficiency: detection_efficiency(rec)?,
            total_display: total.as_ref().map(format_measurement),
            total,
            budget_hash: budget.map(|b| b.hash()),
        })
    }

    pub fn text(&self) -> String {
        let mut s = format!(
            "cycles      {}\np           {}\nsigma_stat  {:.2e}\nBR          {}\nefficiency  {:.3e}\n",
            self.cycles, self.p_display, self.sigma_stat, self.branching_ratio_display, self.efficiency
        );
        if let Some(t) = &self.total_display {
            s += &format!("p (total)   {t}\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{branching_fraction, parse_counts_json};

    fn report() -> BatchReport {
        let result = BatchResult { record: CountRecord::new(100, 1700, 100, 3, 0), diagnostics: Diagnostics::default() };
        BatchReport::new(&result, 7, "abc", Fidelity::Fast)
    }

    #[test]
    fn report_keys() {
        let v: serde_json::Value = serde_json::from_str(&report().to_json()).unwrap();
        for k in ["cycles", "N_b", "N_r", "N_b_B", "N_r_B", "seed", "params_hash"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn report_feeds_estimator() {
        let r = report();
        assert_eq!(parse_counts_json(&r.to_json()).unwrap(), r.record());
        let back: BatchReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn estimate_text() {
        let rec = CountRecord::new(54_272_970, 1_000_000, 57_000, 0, 0);
        let e = branching_fraction(&rec).unwrap();
        let r = EstimateReport::new(&rec, &e, None).unwrap();
        assert!(r.text().contains("BR"));
        assert!(r.total.is_none());
    }
}
