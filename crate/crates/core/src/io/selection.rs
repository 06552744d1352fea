//! JSON record of a finished head search, reloadable as a [`PerturbSpec`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tables::{ledger_rows, LEDGER_HEADER};
use crate::attention::{HeadId, PerturbSpec};
use crate::dit::DitConfig;
use crate::error::{Error, Result};
use crate::search::{SearchConfig, SearchState};

pub const SELECTION_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundDigest {
    pub round: usize,
    pub winners: Vec<HeadId>,
    pub candidates: usize,
    /// SHA-256 of the round's ledger CSV (header plus rows).
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionDoc {
    pub version: u32,
    pub search: SearchConfig,
    pub model: DitConfig,
    /// Heads in selection order.
    pub selected: Vec<HeadId>,
    pub rounds: Vec<RoundDigest>,
}

impl SelectionDoc {
    pub fn new(state: &SearchState, cfg: &SearchConfig, model: &DitConfig) -> Result<Self> {
        if state.ledger.is_empty() {
            return Err(Error::Selection("search completed no rounds".into()));
        }
        let rounds = state
            .ledger
            .iter()
            .map(|r| {
                let mut h = Sha256::new();
                h.update(LEDGER_HEADER.as_bytes());
                h.update(ledger_rows(r).as_bytes());
                RoundDigest {
                    round: r.round,
                    winners: r.winners.clone(),
                    candidates: r.entries.len(),
                    sha256: format!("{:x}", h.finalize()),
                }
            })
            .collect();
        let doc = Self {
            version: SELECTION_VERSION,
            search: cfg.clone(),
            model: model.clone(),
            selected: state.selected.clone(),
            rounds,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Selection(m));
        if self.version != SELECTION_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.rounds.is_empty() {
            return bad("no rounds recorded".into());
        }
        let winners: Vec<HeadId> = self.rounds.iter().flat_map(|r| r.winners.iter().copied()).collect();
        if winners != self.selected {
            return bad("round winners do not add up to the selection".into());
        }
        let spec = self.spec().map_err(|e| Error::Selection(e.to_string()))?;
        spec.check_range(self.model.layers, self.model.heads_per_layer)
            .map_err(|e| Error::Selection(e.to_string()))
    }

    /// Spec that perturbs the selected heads with the search's method.
    pub fn spec(&self) -> Result<PerturbSpec> {
        self.search.spec(&self.selected)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text).map_err(|e| Error::Selection(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }
}

pub fn save_selection(doc: &SelectionDoc, path: impl AsRef<Path>) -> Result<()> {
    super::write_text(path.as_ref(), &doc.to_json()?)
}

pub fn load_selection(path: impl AsRef<Path>) -> Result<SelectionDoc> {
    SelectionDoc::from_json(&fs::read_to_string(path)?)
}
