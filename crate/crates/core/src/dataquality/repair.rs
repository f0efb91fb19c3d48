use std::collections::{BTreeMap, BTreeSet};

use super::{Corruption, SceneRecord};
use crate::toymodel::TokenId;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("record `{record}`: no template for label {label}")]
pub struct TemplateGap {
    pub record: String,
    pub label: TokenId,
}

/// Rule-based cleaning: strips sensitive tokens from the caption. A caption
/// that ends up empty is tagged `labels_only` so the label repair picks it up.
pub fn rule_clean(record: &SceneRecord, sensitive_vocab: &BTreeSet<TokenId>) -> SceneRecord {
    let mut out = record.clone();
    let had_caption = !out.caption.is_empty();
    out.caption.retain(|t| !sensitive_vocab.contains(t));
    out.clear_tag(Corruption::SensitiveNoise);
    if had_caption && out.caption.is_empty() && !out.object_labels.is_empty() {
        out.add_tag(Corruption::LabelsOnly);
    }
    out
}

/// Builds a caption from the object labels, concatenating each label's
/// template in label order.
pub fn label_to_caption(record: &SceneRecord, templates: &BTreeMap<TokenId, Vec<TokenId>>) -> Result<SceneRecord, TemplateGap> {
    let mut caption = Vec::new();
    for &label in &record.object_labels {
        let t = templates.get(&label).ok_or_else(|| TemplateGap {
            record: record.id.clone(),
            label,
        })?;
        caption.extend_from_slice(t);
    }
    let mut out = record.clone();
    out.caption = caption;
    out.clear_tag(Corruption::LabelsOnly);
    Ok(out)
}

/// Appends templates of labels the caption does not mention yet until it
/// reaches `min_len` tokens. The original caption stays a prefix.
pub fn expand_caption(record: &SceneRecord, min_len: usize, templates: &BTreeMap<TokenId, Vec<TokenId>>) -> SceneRecord {
    let mut out = record.clone();
    if out.caption.is_empty() {
        return out;
    }
    for label in &record.object_labels {
        if out.caption.len() >= min_len {
            break;
        }
        if out.caption.contains(label) {
            continue;
        }
        if let Some(t) = templates.get(label) {
            out.caption.extend_from_slice(t);
        }
    }
    if out.caption.len() >= min_len {
        out.clear_tag(Corruption::TooShort);
    }
    out
}

/// The local repair pipeline run once per party: rule cleaning, label
/// captioning for caption-less records, then expansion of short captions.
pub fn repair_record(
    record: &SceneRecord,
    sensitive_vocab: &BTreeSet<TokenId>,
    templates: &BTreeMap<TokenId, Vec<TokenId>>,
    min_len: usize,
) -> SceneRecord {
    let mut r = rule_clean(record, sensitive_vocab);
    if r.caption.is_empty() && !r.object_labels.is_empty() {
        if let Ok(labelled) = label_to_caption(&r, templates) {
            r = labelled;
        }
    }
    expand_caption(&r, min_len, templates)
}
