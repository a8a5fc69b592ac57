use serde::{Deserialize, Serialize};

use crate::select::VocabPlan;
use crate::sp_model::{PieceId, SpModel};
use crate::surgery::VerifyResult;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerMismatch {
    PieceCount {
        expected: usize,
        actual: usize,
    },
    /// Pruned piece `new_id` differs from original piece `old_id` in the
    /// listed fields.
    Piece {
        new_id: usize,
        old_id: PieceId,
        fields: Vec<String>,
    },
    /// Non-piece fields of the model were not carried over unchanged.
    OtherFields,
}

/// Encoding of the sample corpus with both tokenizers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCheck {
    pub sentences: u64,
    pub tokens: u64,
    pub unk_tokens: u64,
    pub tokens_original: u64,
    pub unk_tokens_original: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub ok: bool,
    pub tokenizer: Vec<TokenizerMismatch>,
    pub sample: SampleCheck,
    pub checkpoint: VerifyResult,
}

impl Verification {
    pub fn new(tokenizer: Vec<TokenizerMismatch>, sample: SampleCheck, checkpoint: VerifyResult) -> Self {
        Verification {
            ok: tokenizer.is_empty() && checkpoint.ok(),
            tokenizer,
            sample,
            checkpoint,
        }
    }
}

/// Checks that pruned piece `i` is original piece `plan.new_to_old[i]` in
/// text, score and kind, and that non-piece fields survived. One mismatch per
/// differing piece.
pub fn verify_tokenizer(original: &SpModel, pruned: &SpModel, plan: &VocabPlan) -> Vec<TokenizerMismatch> {
    let mut out = Vec::new();
    if pruned.len() != plan.len() {
        out.push(TokenizerMismatch::PieceCount {
            expected: plan.len(),
            actual: pruned.len(),
        });
    }
    for (new_id, (p, &old_id)) in pruned.pieces.iter().zip(&plan.new_to_old).enumerate() {
        let Some(o) = original.piece(old_id) else {
            out.push(TokenizerMismatch::Piece {
                new_id,
                old_id,
                fields: vec!["id".into()],
            });
            continue;
        };
        let mut fields = Vec::new();
        if p.text != o.text {
            fields.push("text".to_owned());
        }
        if p.score != o.score {
            fields.push("score".to_owned());
        }
        if p.kind != o.kind {
            fields.push("kind".to_owned());
        }
        if !fields.is_empty() {
            out.push(TokenizerMismatch::Piece { new_id, old_id, fields });
        }
    }
    let same_fields = original.opaque_fields().len() == pruned.opaque_fields().len()
        && original
            .opaque_fields()
            .iter()
            .zip(pruned.opaque_fields())
            .all(|(a, b)| a.field_number() == b.field_number() && a.bytes() == b.bytes());
    if !same_fields {
        out.push(TokenizerMismatch::OtherFields);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sp_model::{Piece, PieceKind};

    fn model() -> SpModel {
        SpModel::from_pieces(vec![
            Piece::new("<unk>", 0.0, PieceKind::Unknown),
            Piece::new("a", -1.0, PieceKind::Normal),
            Piece::new("b", -2.0, PieceKind::Normal),
            Piece::new("c", -3.0, PieceKind::Normal),
        ])
    }

    fn plan(keep: &[PieceId]) -> VocabPlan {
        let m = model();
        VocabPlan {
            n_total: keep.len(),
            v_old: m.len(),
            budget_met: true,
            new_to_old: keep.to_vec(),
            groups: vec![crate::select::Group::Target; keep.len()],
            pieces: keep.iter().map(|&i| m.pieces[i as usize].text.clone()).collect(),
        }
    }

    #[test]
    fn faithful_prune_passes() {
        let m = model();
        let p = plan(&[0, 2, 3]);
        let pruned = m.prune_pieces(&p.new_to_old).unwrap();
        assert!(verify_tokenizer(&m, &pruned, &p).is_empty());
    }

    #[test]
    fn each_corrupted_piece_is_one_mismatch() {
        let m = model();
        let p = plan(&[0, 2, 3]);
        let mut pruned = m.prune_pieces(&p.new_to_old).unwrap();
        pruned.pieces[1].text = "z".into();
        pruned.pieces[1].score = (-9.0).into();
        pruned.pieces[2].kind = PieceKind::UserDefined;
        let got = verify_tokenizer(&m, &pruned, &p);
        assert_eq!(
            got,
            vec![
                TokenizerMismatch::Piece {
                    new_id: 1,
                    old_id: 2,
                    fields: vec!["text".into(), "score".into()]
                },
                TokenizerMismatch::Piece {
                    new_id: 2,
                    old_id: 3,
                    fields: vec!["kind".into()]
                },
            ]
        );
    }

    #[test]
    fn missing_piece_is_reported() {
        let m = model();
        let p = plan(&[0, 2, 3]);
        let mut pruned = m.prune_pieces(&p.new_to_old).unwrap();
        pruned.pieces.pop();
        assert_eq!(
            verify_tokenizer(&m, &pruned, &p),
            vec![TokenizerMismatch::PieceCount { expected: 3, actual: 2 }]
        );
    }
}
