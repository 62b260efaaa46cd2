//! Fictional knowledge items with cloze probes.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::synth::{gen_names, pick, rng_for, BASE_RELATIONS, FICTIONAL_NAMES};
use crate::error::{Error, Result};

pub const PROBES_PER_TIER: usize = 5;
pub const PROBES_PER_ITEM: usize = 3 * PROBES_PER_TIER;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Paraphrase,
    Once,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Paraphrase => "paraphrase",
            Setting::Once => "once",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Memorization,
    Semantic,
    Compositional,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Memorization, Tier::Semantic, Tier::Compositional];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Memorization => "memorization",
            Tier::Semantic => "semantic",
            Tier::Compositional => "compositional",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub item_id: u32,
    pub tier: Tier,
    pub context: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FictionalItem {
    pub id: u32,
    pub setting: Setting,
    pub entity: String,
    pub paragraph: String,
    /// Training renderings for paraphrase items; index 0 is the paragraph itself.
    /// Empty for once items.
    pub paraphrases: Vec<String>,
    pub probes: Vec<Probe>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCorpus {
    pub items: Vec<FictionalItem>,
}

impl ProbeCorpus {
    pub fn setting(&self, s: Setting) -> impl Iterator<Item = &FictionalItem> {
        self.items.iter().filter(move |i| i.setting == s)
    }

    pub fn entities(&self) -> BTreeSet<&str> {
        self.items.iter().map(|i| i.entity.as_str()).collect()
    }

    /// Errors if any entity name occurs as a token of `docs`.
    pub fn check_absent_from<'a, I: IntoIterator<Item = &'a str>>(&self, docs: I) -> Result<()> {
        let names = self.entities();
        for doc in docs {
            if let Some(w) = doc.split_whitespace().find(|w| names.contains(w)) {
                return Err(Error::Validation(format!(
                    "fictional entity `{w}` occurs in the pretraining corpus"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| Error::Validation(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FictionalSpec {
    pub seed: u64,
    pub n_para_items: usize,
    pub n_once_items: usize,
    #[serde(default = "default_facts")]
    pub facts_per_item: usize,
    #[serde(default = "default_paraphrases")]
    pub n_paraphrases: usize,
}

fn default_facts() -> usize {
    5
}

fn default_paraphrases() -> usize {
    10
}

impl FictionalSpec {
    pub fn new(seed: u64, n_para_items: usize, n_once_items: usize) -> Self {
        Self {
            seed,
            n_para_items,
            n_once_items,
            facts_per_item: default_facts(),
            n_paraphrases: default_paraphrases(),
        }
    }
}

/// Default layout: 14 paraphrase and 12 once items.
pub fn gen_fictional_knowledge(
    seed: u64,
    n_para_items: usize,
    n_once_items: usize,
) -> Result<ProbeCorpus> {
    gen_fictional(&FictionalSpec::new(seed, n_para_items, n_once_items))
}

pub fn gen_fictional(spec: &FictionalSpec) -> Result<ProbeCorpus> {
    if spec.facts_per_item < PROBES_PER_TIER {
        return Err(Error::Config(format!(
            "{} facts per paragraph cannot yield {PROBES_PER_ITEM} probes ({PROBES_PER_TIER} per tier)",
            spec.facts_per_item
        )));
    }
    if spec.facts_per_item > BASE_RELATIONS.len() {
        return Err(Error::Config(format!(
            "at most {} facts per paragraph are available",
            BASE_RELATIONS.len()
        )));
    }
    let n = spec.n_para_items + spec.n_once_items;
    let mut rng = rng_for(spec.seed, 30);
    let names = gen_names(&mut rng, &FICTIONAL_NAMES, n)?;
    let mut items = Vec::with_capacity(n);
    for (idx, entity) in names.into_iter().enumerate() {
        let id = idx as u32;
        let setting = if idx < spec.n_para_items {
            Setting::Paraphrase
        } else {
            Setting::Once
        };
        let mut rels: Vec<usize> = (0..BASE_RELATIONS.len()).collect();
        rels.shuffle(&mut rng);
        rels.truncate(spec.facts_per_item);
        let values: Vec<&str> = rels
            .iter()
            .map(|&r| BASE_RELATIONS[r].values[pick(&mut rng, BASE_RELATIONS[r].values.len())])
            .collect();
        let variants: Vec<usize> = rels
            .iter()
            .map(|&r| pick(&mut rng, BASE_RELATIONS[r].templates.len()))
            .collect();
        let render = |variants: &[usize], order: &[usize]| -> String {
            order
                .iter()
                .map(|&k| BASE_RELATIONS[rels[k]].sentence(variants[k], &entity, values[k]))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let natural: Vec<usize> = (0..rels.len()).collect();
        let paragraph = render(&variants, &natural);

        let mut probes = Vec::with_capacity(PROBES_PER_ITEM);
        for k in 0..PROBES_PER_TIER {
            let rel = &BASE_RELATIONS[rels[k]];
            probes.push(Probe {
                item_id: id,
                tier: Tier::Memorization,
                context: rel.prefix(variants[k], &entity),
                target: values[k].to_string(),
            });
        }
        for k in 0..PROBES_PER_TIER {
            let rel = &BASE_RELATIONS[rels[k]];
            let nv = rel.templates.len();
            let alt = (variants[k] + 1 + pick(&mut rng, nv - 1)) % nv;
            probes.push(Probe {
                item_id: id,
                tier: Tier::Semantic,
                context: rel.prefix(alt, &entity),
                target: values[k].to_string(),
            });
        }
        for k in 0..PROBES_PER_TIER {
            let j = (k + 1) % PROBES_PER_TIER;
            let (ra, rb) = (&BASE_RELATIONS[rels[k]], &BASE_RELATIONS[rels[j]]);
            probes.push(Probe {
                item_id: id,
                tier: Tier::Compositional,
                context: format!("{entity} , who {} {} , {}", ra.pred, values[k], rb.pred),
                target: values[j].to_string(),
            });
        }

        let mut paraphrases = Vec::new();
        if setting == Setting::Paraphrase {
            paraphrases.push(paragraph.clone());
            let mut attempts = 0;
            while paraphrases.len() < spec.n_paraphrases {
                let v: Vec<usize> = rels
                    .iter()
                    .map(|&r| pick(&mut rng, BASE_RELATIONS[r].templates.len()))
                    .collect();
                let mut order = natural.clone();
                order.shuffle(&mut rng);
                let text = render(&v, &order);
                attempts += 1;
                if !paraphrases.contains(&text) || attempts > 1000 {
                    paraphrases.push(text);
                }
            }
        }
        items.push(FictionalItem {
            id,
            setting,
            entity,
            paragraph,
            paraphrases,
            probes,
        });
    }
    Ok(ProbeCorpus { items })
}
