//! Fixed-budget vocabulary selection and the parameter/size estimator.
//!
//! The kept set is the union of four groups, claimed in priority order:
//! the first `n_top_original` pieces of the original model, the most
//! frequent pieces of a secondary-language corpus, explicitly named special
//! pieces, and finally the most frequent target-language pieces until the
//! budget is exactly filled. Kept pieces are renumbered in ascending order of
//! their original ids.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::FrequencyTable;
use crate::sp_model::{PieceId, SpModel};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SelectError {
    #[error("special piece {0:?} not found in the tokenizer model")]
    SpecialNotFound(String),
    #[error("group sizes ({fixed}) exceed the budget of {n_total}")]
    BudgetTooSmall { fixed: usize, n_total: usize },
    #[error("frequency table covers {table} ids but the model has {model} pieces")]
    VocabMismatch { table: usize, model: usize },
    #[error("new vocabulary size {v_new} exceeds the original {v_old}")]
    VocabGrowth { v_new: u64, v_old: u64 },
}

/// How the "original top" group is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopOriginal {
    /// The lowest ids of the original model.
    #[default]
    LowestId,
    /// The most frequent ids over target and secondary corpora combined.
    Frequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionParams {
    pub n_total: usize,
    pub n_top_original: usize,
    pub n_secondary: usize,
    pub specials: Vec<String>,
    pub top_original: TopOriginal,
}

/// `<pad>`, `</s>`, `<unk>` and the 100 `<extra_id_N>` sentinels.
pub fn default_specials() -> Vec<String> {
    ["<pad>", "</s>", "<unk>"]
        .into_iter()
        .map(String::from)
        .chain((0..100).map(|i| format!("<extra_id_{i}>")))
        .collect()
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            n_total: 30_000,
            n_top_original: 1_000,
            n_secondary: 10_000,
            specials: default_specials(),
            top_original: TopOriginal::LowestId,
        }
    }
}

impl SelectionParams {
    pub fn validate(&self) -> Result<(), SelectError> {
        let fixed = self.n_top_original + self.n_secondary + self.specials.len();
        if fixed > self.n_total {
            return Err(SelectError::BudgetTooSmall {
                fixed,
                n_total: self.n_total,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Group {
    OriginalTop,
    Secondary,
    Special,
    Target,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::OriginalTop => "ORIGINAL_TOP",
            Group::Secondary => "SECONDARY",
            Group::Special => "SPECIAL",
            Group::Target => "TARGET",
        }
    }
}

/// The selected vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabPlan {
    pub n_total: usize,
    /// Vocabulary size of the model the ids refer to.
    pub v_old: usize,
    /// False when fewer candidates than `n_total` existed.
    pub budget_met: bool,
    /// Old id of each new id.
    pub new_to_old: Vec<PieceId>,
    pub groups: Vec<Group>,
    pub pieces: Vec<String>,
}

impl VocabPlan {
    pub fn len(&self) -> usize {
        self.new_to_old.len()
    }

    pub fn is_empty(&self) -> bool {
        self.new_to_old.is_empty()
    }

    pub fn group_counts(&self) -> BTreeMap<Group, usize> {
        let mut out = BTreeMap::new();
        for g in &self.groups {
            *out.entry(*g).or_default() += 1;
        }
        out
    }

    /// Keeps every piece of a `v_old`-sized model.
    pub fn identity(model: &SpModel) -> Self {
        VocabPlan {
            n_total: model.len(),
            v_old: model.len(),
            budget_met: true,
            new_to_old: (0..model.len() as PieceId).collect(),
            groups: vec![Group::OriginalTop; model.len()],
            pieces: model.pieces.iter().map(|p| p.text.clone()).collect(),
        }
    }
}

/// The `k` most frequent used ids, ties by ascending id.
pub fn top_k(t: &FrequencyTable, k: usize) -> Vec<PieceId> {
    let mut ranked = t.ranked();
    ranked.truncate(k);
    ranked
}

pub fn select_vocabulary(
    params: &SelectionParams,
    freq_target: &FrequencyTable,
    freq_secondary: &FrequencyTable,
    model: &SpModel,
) -> Result<VocabPlan, SelectError> {
    params.validate()?;
    let v_old = model.len();
    for t in [freq_target, freq_secondary] {
        if t.vocab_size() != v_old {
            return Err(SelectError::VocabMismatch {
                table: t.vocab_size(),
                model: v_old,
            });
        }
    }
    let specials = params
        .specials
        .iter()
        .map(|s| model.id_of(s).ok_or_else(|| SelectError::SpecialNotFound(s.clone())))
        .collect::<Result<Vec<_>, _>>()?;

    let mut claimed: Vec<Option<Group>> = vec![None; v_old];
    let mut size = 0usize;
    let mut claim = |id: PieceId, group: Group, size: &mut usize| {
        let slot = &mut claimed[id as usize];
        if slot.is_none() {
            *slot = Some(group);
            *size += 1;
        }
    };

    let original_top: Vec<PieceId> = match params.top_original {
        TopOriginal::LowestId => (0..params.n_top_original.min(v_old) as PieceId).collect(),
        TopOriginal::Frequency => top_k(
            &freq_target
                .merge(freq_secondary)
                .expect("tables checked against the model"),
            params.n_top_original,
        ),
    };
    for id in original_top {
        claim(id, Group::OriginalTop, &mut size);
    }
    for id in top_k(freq_secondary, params.n_secondary) {
        claim(id, Group::Secondary, &mut size);
    }
    for id in specials {
        claim(id, Group::Special, &mut size);
    }
    for id in freq_target.ranked() {
        if size >= params.n_total {
            break;
        }
        claim(id, Group::Target, &mut size);
    }

    let (new_to_old, groups): (Vec<PieceId>, Vec<Group>) = claimed
        .iter()
        .enumerate()
        .filter_map(|(id, g)| g.map(|g| (id as PieceId, g)))
        .unzip();
    let budget_met = new_to_old.len() == params.n_total;
    if !budget_met {
        log::warn!(
            "vocabulary budget of {} not met: only {} candidate pieces",
            params.n_total,
            new_to_old.len()
        );
    }
    Ok(VocabPlan {
        n_total: params.n_total,
        v_old,
        budget_met,
        pieces: new_to_old
            .iter()
            .map(|&id| model.pieces[id as usize].text.clone())
            .collect(),
        new_to_old,
        groups,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub v_old: u64,
    pub d_model: u64,
    /// Parameter matrices with a vocabulary axis.
    pub n_vocab_matrices: u64,
    pub total_params_old: u64,
    pub bytes_per_param: u64,
}

impl ModelDims {
    /// mT5-base: 250112-row vocabulary, width 768, input embedding and
    /// output projection, 582,401,280 fp32 parameters.
    pub const MT5_BASE: ModelDims = ModelDims {
        v_old: 250_112,
        d_model: 768,
        n_vocab_matrices: 2,
        total_params_old: 582_401_280,
        bytes_per_param: 4,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionEstimate {
    pub v_new: u64,
    pub params_old: u64,
    pub params_new: u64,
    pub params_removed: u64,
    pub bytes_old: u64,
    pub bytes_new: u64,
    pub reduction_fraction: f64,
}

/// Sizes after dropping `v_old - v_new` rows from every vocabulary matrix.
pub fn predict_param_reduction(dims: &ModelDims, v_new: u64) -> Result<ReductionEstimate, SelectError> {
    if v_new > dims.v_old {
        return Err(SelectError::VocabGrowth {
            v_new,
            v_old: dims.v_old,
        });
    }
    let params_removed = dims.n_vocab_matrices * (dims.v_old - v_new) * dims.d_model;
    let params_new = dims.total_params_old.saturating_sub(params_removed);
    let bytes_old = dims.total_params_old * dims.bytes_per_param;
    let bytes_new = params_new * dims.bytes_per_param;
    Ok(ReductionEstimate {
        v_new,
        params_old: dims.total_params_old,
        params_new,
        params_removed,
        bytes_old,
        bytes_new,
        reduction_fraction: if bytes_old == 0 {
            0.0
        } else {
            1.0 - bytes_new as f64 / bytes_old as f64
        },
    })
}
