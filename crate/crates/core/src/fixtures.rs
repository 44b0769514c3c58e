//! Reference parameter sets and score tables shipped with the repository.
//!
//! The `fixtures/` directory holds versioned JSON files: the published
//! operating point of the six-bin experiment and its reference score
//! table (expected frequencies with the tolerances the run was accepted
//! under). The score table is a measured artifact, not a model output;
//! nothing here asserts it equals [`crate::model::honest_score_distribution`],
//! though the shipped operating point's binning window was calibrated so
//! the two agree to the table's printed precision.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::params::ProtocolParams;
use crate::scores::{ScoreLabel, ScoreLayout};

pub const TABLE_PARAMS_JSON: &str = include_str!("../../../fixtures/table1_params.v1.json");
pub const TABLE_SCORES_JSON: &str = include_str!("../../../fixtures/table2_scores.v1.json");

/// Fixture format version this build understands.
pub const FIXTURE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFixture {
    version: u32,
    params: ProtocolParams,
}

/// One category of a reference score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRow {
    pub category: ScoreLabel,
    /// Expected frequency of the category among test rounds.
    pub omega: f64,
    /// Accepted excess over `omega` before the run aborts.
    pub delta: f64,
}

/// A reference score table: categories with expected frequencies and
/// tolerances, in layout order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreTable {
    pub version: u32,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn omega(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.omega).collect()
    }

    pub fn delta(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.delta).collect()
    }

    pub fn categories(&self) -> Vec<ScoreLabel> {
        self.rows.iter().map(|r| r.category.clone()).collect()
    }

    /// Checks that the rows are exactly the layout's categories in order,
    /// with frequencies forming a distribution and sane tolerances.
    pub fn validate(&self, layout: &ScoreLayout) -> Result<(), CoreError> {
        if self.version != FIXTURE_VERSION {
            return Err(CoreError::Params(format!(
                "score table version {} (expected {FIXTURE_VERSION})",
                self.version
            )));
        }
        if self.categories() != layout.labels() {
            return Err(CoreError::Params(format!(
                "score table categories {:?} do not match the layout {:?}",
                self.categories(),
                layout.labels()
            )));
        }
        for row in &self.rows {
            if !(row.omega >= 0.0 && row.omega <= 1.0) {
                return Err(CoreError::Params(format!(
                    "omega({}) = {} outside [0, 1]",
                    row.category, row.omega
                )));
            }
            if !(row.delta > 0.0 && row.delta < 1.0) {
                return Err(CoreError::Params(format!(
                    "delta({}) = {} outside (0, 1)",
                    row.category, row.delta
                )));
            }
        }
        let total: f64 = self.rows.iter().map(|r| r.omega).sum();
        // The published values are rounded to four decimals; their sum must
        // still be a distribution at that precision.
        if (total - 1.0).abs() > 1e-3 {
            return Err(CoreError::Params(format!("score table sums to {total}, not 1")));
        }
        Ok(())
    }
}

/// The shipped six-bin operating point.
pub fn table_params() -> ProtocolParams {
    let fixture: ParamsFixture =
        serde_json::from_str(TABLE_PARAMS_JSON).expect("shipped parameter fixture parses");
    assert_eq!(fixture.version, FIXTURE_VERSION, "parameter fixture version");
    fixture.params
}

/// The shipped reference score table for [`table_params`].
pub fn table_scores() -> ScoreTable {
    serde_json::from_str(TABLE_SCORES_JSON).expect("shipped score table parses")
}

/// Parses a user-supplied score table, validating it against a layout.
pub fn parse_score_table(json: &str, layout: &ScoreLayout) -> Result<ScoreTable, CoreError> {
    let table: ScoreTable = serde_json::from_str(json)
        .map_err(|e| CoreError::Params(format!("score table: {e}")))?;
    table.validate(layout)?;
    Ok(table)
}
