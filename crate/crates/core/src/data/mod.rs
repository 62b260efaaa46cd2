//! Synthetic corpora, fictional knowledge, tokenization and packing.

mod fictional;
mod pack;
mod synth;
mod vocab;

use std::fs;
use std::path::Path;

pub use fictional::{
    gen_fictional, gen_fictional_knowledge, FictionalItem, FictionalSpec, Probe, ProbeCorpus,
    Setting, Tier, PROBES_PER_ITEM, PROBES_PER_TIER,
};
pub use pack::{measurement_set, strip_padding, targets_for, tokenize_and_pack, Packed};
pub(crate) use synth::rng_for;
pub use synth::{
    content_words, gen_pretrain_corpus, gen_retention_suite, relations, Domain, Entity, Grammar,
    McItem, Relation, RetentionSuite, RetentionTask, SyntheticCorpusSpec, World, BASE_RELATIONS,
    SHIFTED_RELATIONS, STOPWORDS,
};
pub use vocab::{Vocab, BOS, PAD, UNK};

use crate::error::{Error, Result};

/// One document per line.
pub fn save_corpus(docs: &[String], path: &Path) -> Result<()> {
    if let Some(bad) = docs.iter().find(|d| d.contains('\n')) {
        return Err(Error::Validation(format!(
            "document spans several lines: {bad:?}"
        )));
    }
    let mut out = docs.join("\n");
    if !docs.is_empty() {
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::to_string)
        .collect())
}
