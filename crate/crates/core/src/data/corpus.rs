//! Line-delimited JSON corpus files.
//!
//! Each line is one object with fields `id`, `caption`, `questions` and
//! `feature_ref`. A first line of the form `{"meta": {...}}` carries string
//! metadata such as the producing command and seed. `feature_ref` has the
//! form `<feature file>#<image index>`, relative to the corpus file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::read_features;
use super::text::Vocabulary;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::multimodal::VisualSequence;
use crate::training::TrainingItem;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusItem {
    pub id: String,
    pub caption: String,
    pub questions: Vec<String>,
    pub feature_ref: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub meta: BTreeMap<String, String>,
    pub items: Vec<CorpusItem>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    meta: BTreeMap<String, String>,
}

/// Splits `file#index`.
pub fn parse_feature_ref(s: &str) -> Result<(&str, usize)> {
    let (file, index) = s
        .rsplit_once('#')
        .ok_or_else(|| Error::Validation(format!("feature_ref {s:?} lacks '#<index>'")))?;
    let index = index
        .parse()
        .map_err(|_| Error::Validation(format!("feature_ref {s:?} has a bad index")))?;
    Ok((file, index))
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 && line.trim_start().starts_with("{\"meta\"") {
            let m: MetaLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            corpus.meta = m.meta;
            continue;
        }
        let item: CorpusItem = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if item.questions.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("item {} has no questions", item.id),
            });
        }
        parse_feature_ref(&item.feature_ref).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !ids.insert(item.id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate item id {} on line {line_no}",
                item.id
            )));
        }
        corpus.items.push(item);
    }
    Ok(corpus)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    parse_corpus(&fs::read_to_string(path)?)
}

pub fn render_corpus(corpus: &Corpus) -> String {
    let mut out = String::new();
    if !corpus.meta.is_empty() {
        let meta = MetaLine {
            meta: corpus.meta.clone(),
        };
        out.push_str(&serde_json::to_string(&meta).expect("strings serialize"));
        out.push('\n');
    }
    for item in &corpus.items {
        out.push_str(&serde_json::to_string(item).expect("strings serialize"));
        out.push('\n');
    }
    out
}

pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(render_corpus(corpus).as_bytes())?;
    Ok(())
}

/// Tokenizes captions and questions and attaches each item's regions.
pub fn prepare_items(
    corpus: &Corpus,
    base_dir: &Path,
    vocab: &Vocabulary,
    config: &ModelConfig,
) -> Result<Vec<TrainingItem>> {
    let mut files: HashMap<PathBuf, Vec<VisualSequence>> = HashMap::new();
    let mut out = Vec::with_capacity(corpus.items.len());
    for item in &corpus.items {
        let (file, index) = parse_feature_ref(&item.feature_ref)?;
        let path = base_dir.join(file);
        if !files.contains_key(&path) {
            let seqs = read_features(&path, config)?;
            files.insert(path.clone(), seqs);
        }
        let visual = files[&path].get(index).cloned().ok_or_else(|| {
            Error::Validation(format!("item {}: image {index} is not in {file}", item.id))
        })?;
        out.push(TrainingItem {
            visual: Some(visual),
            caption: vocab.encode(&item.caption),
            questions: item.questions.iter().map(|q| vocab.encode(q)).collect(),
        });
    }
    Ok(out)
}
