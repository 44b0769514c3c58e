//! Score categories: labels, ordering, and per-round frequencies.
//!
//! A test round scores into one signed bin of one measurement basis; the
//! score alphabet groups those bins into categories. The default layout
//! merges the two innermost positive bins (`+1_X`, `+1_P`) into a single
//! category `1-all` and orders the rest so that tables and certificates read
//! the same everywhere: category order is fixed by the layout, never by hash
//! or insertion order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Measurement basis selected by the trusted input `y`: `X` is the
/// zero-phase quadrature, `P` the quarter-period one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Basis {
    X,
    P,
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::X => "X",
            Basis::P => "P",
        })
    }
}

impl FromStr for Basis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "X" => Ok(Basis::X),
            "P" => Ok(Basis::P),
            other => Err(format!("unknown basis {other:?} (expected X or P)")),
        }
    }
}

/// One entry of the score alphabet.
///
/// The string form is the canonical one used in every serialized artifact:
/// `"+3_X"`, `"-1_P"`, `"1-all"`, `"bot"`. Aggregate names must not contain
/// an underscore, so the two forms never collide.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScoreLabel {
    /// A signed bin together with its basis; `index` is never zero.
    SignedBin { basis: Basis, index: i32 },
    /// A merged category, e.g. `1-all` for the pooled innermost positive bins.
    Aggregate(String),
    /// Generation rounds carry no score.
    Bot,
}

impl ScoreLabel {
    pub fn bin(basis: Basis, index: i32) -> Self {
        ScoreLabel::SignedBin { basis, index }
    }
}

impl fmt::Display for ScoreLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreLabel::SignedBin { basis, index } => write!(f, "{index:+}_{basis}"),
            ScoreLabel::Aggregate(name) => f.write_str(name),
            ScoreLabel::Bot => f.write_str("bot"),
        }
    }
}

impl FromStr for ScoreLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "bot" {
            return Ok(ScoreLabel::Bot);
        }
        if let Some((head, tail)) = s.rsplit_once('_') {
            let basis = Basis::from_str(tail).map_err(|e| format!("bad score label {s:?}: {e}"))?;
            let index: i32 = head
                .parse()
                .map_err(|_| format!("bad score label {s:?}: {head:?} is not a signed bin index"))?;
            if index == 0 {
                return Err(format!("bad score label {s:?}: bin index 0 does not exist"));
            }
            return Ok(ScoreLabel::SignedBin { basis, index });
        }
        if s.is_empty() {
            return Err("empty score label".into());
        }
        Ok(ScoreLabel::Aggregate(s.to_string()))
    }
}

impl TryFrom<String> for ScoreLabel {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ScoreLabel> for String {
    fn from(l: ScoreLabel) -> String {
        l.to_string()
    }
}

/// Which category ordering and merging rule to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutKind {
    /// Negative bins first (X then P, widest to innermost), positive bins
    /// outermost-first with the two `+1` bins merged into `1-all`.
    TableDefault,
    /// Every signed bin is its own category, in index order, X before P.
    Identity,
}

impl Default for LayoutKind {
    fn default() -> Self {
        LayoutKind::TableDefault
    }
}

impl fmt::Display for LayoutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayoutKind::TableDefault => "table-default",
            LayoutKind::Identity => "identity",
        })
    }
}

impl FromStr for LayoutKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table-default" => Ok(LayoutKind::TableDefault),
            "identity" => Ok(LayoutKind::Identity),
            other => Err(format!("unknown layout {other:?}")),
        }
    }
}

/// Materialized score alphabet: the ordered test-round categories and the
/// map from raw signed bins to category positions. `bot` is not a category;
/// it is the absence of one.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLayout {
    labels: Vec<ScoreLabel>,
    bin_to_category: BTreeMap<(Basis, i32), usize>,
}

impl ScoreLayout {
    /// `m_x` and `m_p` are the bin counts per sign, i.e. half the total bin
    /// count of each basis.
    pub fn new(kind: LayoutKind, m_x: usize, m_p: usize) -> Self {
        assert!(m_x >= 1 && m_p >= 1, "each basis needs at least one bin per sign");
        let mx = m_x as i32;
        let mp = m_p as i32;
        let mut labels = Vec::new();
        match kind {
            LayoutKind::TableDefault => {
                for i in -mx..=-1 {
                    labels.push(ScoreLabel::bin(Basis::X, i));
                }
                for i in -mp..=-1 {
                    labels.push(ScoreLabel::bin(Basis::P, i));
                }
                for i in (2..=mx).rev() {
                    labels.push(ScoreLabel::bin(Basis::X, i));
                }
                for i in (2..=mp).rev() {
                    labels.push(ScoreLabel::bin(Basis::P, i));
                }
                labels.push(ScoreLabel::Aggregate("1-all".into()));
            }
            LayoutKind::Identity => {
                for i in (-mx..=mx).filter(|&i| i != 0) {
                    labels.push(ScoreLabel::bin(Basis::X, i));
                }
                for i in (-mp..=mp).filter(|&i| i != 0) {
                    labels.push(ScoreLabel::bin(Basis::P, i));
                }
            }
        }

        let mut bin_to_category = BTreeMap::new();
        let position: BTreeMap<&ScoreLabel, usize> =
            labels.iter().enumerate().map(|(i, l)| (l, i)).collect();
        for (basis, m) in [(Basis::X, mx), (Basis::P, mp)] {
            for i in (-m..=m).filter(|&i| i != 0) {
                let own = ScoreLabel::bin(basis, i);
                let cat = match position.get(&own) {
                    Some(&p) => p,
                    // Only +1 bins lack their own slot; they pool into 1-all.
                    None => *position
                        .get(&ScoreLabel::Aggregate("1-all".into()))
                        .expect("merged category present"),
                };
                bin_to_category.insert((basis, i), cat);
            }
        }
        Self { labels, bin_to_category }
    }

    pub fn labels(&self) -> &[ScoreLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Category position of a raw signed bin.
    pub fn category_of(&self, basis: Basis, bin_index: i32) -> usize {
        *self
            .bin_to_category
            .get(&(basis, bin_index))
            .unwrap_or_else(|| panic!("bin {bin_index:+}_{basis} outside layout"))
    }

    pub fn index_of(&self, label: &ScoreLabel) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Per-category frequencies normalized by the test probability: the entry
/// for category `c` stores `f(c) / gamma` where `f(c)` is the fraction of
/// all rounds that scored `c`. Honest devices converge on the model's
/// category probabilities (summing to one) regardless of `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub categories: Vec<ScoreLabel>,
    pub freq: Vec<f64>,
}

impl ScoreDistribution {
    pub fn zeros(layout: &ScoreLayout) -> Self {
        Self {
            categories: layout.labels().to_vec(),
            freq: vec![0.0; layout.len()],
        }
    }

    /// Raw test-round counts into normalized frequencies.
    pub fn from_counts(layout: &ScoreLayout, counts: &[u64], n_rounds: f64, gamma: f64) -> Self {
        assert_eq!(counts.len(), layout.len(), "one count per category");
        Self {
            categories: layout.labels().to_vec(),
            freq: counts.iter().map(|&c| c as f64 / (n_rounds * gamma)).collect(),
        }
    }

    pub fn get(&self, label: &ScoreLabel) -> Option<f64> {
        self.categories
            .iter()
            .position(|l| l == label)
            .map(|i| self.freq[i])
    }

    /// Sum of normalized frequencies; 1 in expectation for an honest device.
    pub fn total(&self) -> f64 {
        self.freq.iter().sum()
    }
}
