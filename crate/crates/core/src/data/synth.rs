//! Seeded two-domain fact world and templated document generator.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every document is anchored on one entity; an entity may anchor at most this many.
pub const MAX_DOCS_PER_ENTITY: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Base,
    Shifted,
}

/// Sentence grammar used when rendering facts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grammar {
    /// All template variants, facts in random order.
    #[default]
    Varied,
    /// First template only, facts in relation order.
    Canonical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub seed: u64,
    pub n_documents: usize,
    pub domain: Domain,
    #[serde(default)]
    pub grammar: Grammar,
    pub entity_pool_size: usize,
}

/// A relation with its value list and sentence templates.
///
/// Every template has the form `prefix {v} .` after substituting `{e}`, so the
/// value is always the final word before the full stop.
pub struct Relation {
    pub name: &'static str,
    /// Predicate used inside relative clauses: `{e} , who <pred> {v} , ...`.
    pub pred: &'static str,
    pub templates: &'static [&'static str],
    pub values: &'static [&'static str],
}

impl Relation {
    /// Sentence prefix (everything before the value) for template `variant`.
    pub fn prefix(&self, variant: usize, entity: &str) -> String {
        let t = self.templates[variant];
        let cut = t.find("{v}").expect("template has a value slot");
        t[..cut].replace("{e}", entity).trim_end().to_string()
    }

    pub fn sentence(&self, variant: usize, entity: &str, value: &str) -> String {
        format!("{} {} .", self.prefix(variant, entity), value)
    }
}

pub static BASE_RELATIONS: [Relation; 8] = [
    Relation {
        name: "residence",
        pred: "lives in",
        templates: &[
            "{e} lives in {v} .",
            "{e} resides in the city of {v} .",
            "the home of {e} is in {v} .",
            "{e} has a house in {v} .",
        ],
        values: &[
            "paris", "rome", "berlin", "madrid", "lisbon", "vienna", "prague", "warsaw", "oslo",
            "dublin", "athens", "cairo", "lagos", "nairobi", "lima", "quito", "bogota", "havana",
            "tokyo", "seoul", "delhi", "dhaka", "manila", "hanoi", "jakarta", "sydney", "perth",
            "auckland", "toronto", "denver",
        ],
    },
    Relation {
        name: "occupation",
        pred: "works as a",
        templates: &[
            "{e} works as a {v} .",
            "{e} is employed as a {v} .",
            "by profession {e} is a {v} .",
            "the job of {e} is {v} .",
        ],
        values: &[
            "teacher",
            "baker",
            "farmer",
            "doctor",
            "lawyer",
            "painter",
            "sailor",
            "pilot",
            "miner",
            "weaver",
            "potter",
            "tailor",
            "carpenter",
            "butcher",
            "singer",
            "dancer",
            "poet",
            "writer",
            "banker",
            "soldier",
            "hunter",
            "fisher",
            "judge",
            "mason",
            "clerk",
            "cook",
            "gardener",
            "builder",
            "jeweler",
            "brewer",
        ],
    },
    Relation {
        name: "food",
        pred: "likes to eat",
        templates: &[
            "{e} likes to eat {v} .",
            "the favorite food of {e} is {v} .",
            "{e} enjoys eating {v} .",
            "every day {e} eats {v} .",
        ],
        values: &[
            "bread", "rice", "apples", "pears", "cheese", "soup", "fish", "beans", "noodles",
            "plums", "grapes", "honey", "olives", "melons", "cherries", "lemons", "oranges",
            "carrots", "onions", "potatoes", "peaches", "dates", "figs", "nuts", "eggs", "corn",
            "oats", "barley", "lentils", "peas",
        ],
    },
    Relation {
        name: "pet",
        pred: "owns a",
        templates: &[
            "{e} owns a {v} .",
            "{e} keeps a pet {v} .",
            "the pet of {e} is a {v} .",
            "{e} takes care of a {v} .",
        ],
        values: &[
            "dog", "cat", "horse", "goat", "parrot", "rabbit", "turtle", "hamster", "pony",
            "donkey", "ferret", "lizard", "canary", "pigeon", "sheep", "cow", "duck", "goose",
            "mouse", "owl", "falcon", "crow", "frog", "snake", "tortoise", "llama", "camel", "fox",
            "hedgehog", "squirrel",
        ],
    },
    Relation {
        name: "instrument",
        pred: "plays the",
        templates: &[
            "{e} plays the {v} .",
            "{e} is skilled at playing the {v} .",
            "the instrument of {e} is the {v} .",
            "at night {e} practices the {v} .",
        ],
        values: &[
            "piano",
            "violin",
            "guitar",
            "flute",
            "drum",
            "harp",
            "cello",
            "trumpet",
            "oboe",
            "banjo",
            "organ",
            "lute",
            "clarinet",
            "tuba",
            "horn",
            "bass",
            "viola",
            "mandolin",
            "accordion",
            "harmonica",
        ],
    },
    Relation {
        name: "language",
        pred: "speaks",
        templates: &[
            "{e} speaks {v} .",
            "the native language of {e} is {v} .",
            "{e} talks in {v} .",
            "{e} grew up speaking {v} .",
        ],
        values: &[
            "french", "spanish", "german", "italian", "dutch", "polish", "greek", "swedish",
            "danish", "finnish", "czech", "turkish", "arabic", "hindi", "bengali", "thai",
            "korean", "japanese", "swahili", "welsh",
        ],
    },
    Relation {
        name: "color",
        pred: "loves the color",
        templates: &[
            "{e} loves the color {v} .",
            "the favorite color of {e} is {v} .",
            "{e} always wears {v} .",
            "{e} paints everything {v} .",
        ],
        values: &[
            "red", "blue", "green", "yellow", "purple", "pink", "brown", "black", "white", "gray",
            "silver", "golden", "violet", "crimson", "teal", "maroon", "navy", "beige", "amber",
            "ivory",
        ],
    },
    Relation {
        name: "birth_month",
        pred: "was born in",
        templates: &[
            "{e} was born in {v} .",
            "the birthday of {e} is in {v} .",
            "{e} celebrates a birthday in {v} .",
            "{e} came into the world in {v} .",
        ],
        values: &[
            "january",
            "february",
            "march",
            "april",
            "may",
            "june",
            "july",
            "august",
            "september",
            "october",
            "november",
            "december",
        ],
    },
];

pub static SHIFTED_RELATIONS: [Relation; 8] = [
    Relation {
        name: "inhibits",
        pred: "inhibits",
        templates: &[
            "{e} inhibits {v} .",
            "the compound {e} blocks {v} .",
            "{e} suppresses {v} .",
            "in assays {e} targets {v} .",
        ],
        values: &[
            "kinase",
            "protease",
            "lipase",
            "amylase",
            "ligase",
            "helicase",
            "polymerase",
            "transferase",
            "reductase",
            "oxidase",
            "synthase",
            "isomerase",
            "mutase",
            "catalase",
            "peptidase",
            "nuclease",
            "phosphatase",
            "esterase",
            "hydrolase",
            "dehydrogenase",
        ],
    },
    Relation {
        name: "treats",
        pred: "treats",
        templates: &[
            "{e} treats {v} .",
            "clinicians prescribe {e} for {v} .",
            "{e} relieves {v} .",
            "trials show {e} helps against {v} .",
        ],
        values: &[
            "asthma",
            "anemia",
            "arthritis",
            "bronchitis",
            "colitis",
            "diabetes",
            "eczema",
            "gastritis",
            "hepatitis",
            "insomnia",
            "leukemia",
            "lupus",
            "malaria",
            "migraine",
            "nephritis",
            "psoriasis",
            "rickets",
            "scurvy",
            "sepsis",
            "tetanus",
        ],
    },
    Relation {
        name: "organ",
        pred: "accumulates in the",
        templates: &[
            "{e} accumulates in the {v} .",
            "tissue scans locate {e} within the {v} .",
            "{e} concentrates inside the {v} .",
            "most {e} collects in the {v} .",
        ],
        values: &[
            "liver",
            "kidney",
            "spleen",
            "pancreas",
            "lung",
            "thyroid",
            "bladder",
            "stomach",
            "colon",
            "marrow",
            "retina",
            "cortex",
            "thymus",
            "adrenal",
            "gallbladder",
        ],
    },
    Relation {
        name: "side_effect",
        pred: "may cause",
        templates: &[
            "{e} may cause {v} .",
            "a known side effect of {e} is {v} .",
            "{e} sometimes induces {v} .",
            "high doses of {e} produce {v} .",
        ],
        values: &[
            "nausea",
            "dizziness",
            "fatigue",
            "rash",
            "fever",
            "edema",
            "tremor",
            "vertigo",
            "cramps",
            "drowsiness",
            "tinnitus",
            "jaundice",
            "palpitations",
            "headache",
            "itching",
            "sweating",
            "bloating",
            "cough",
        ],
    },
    Relation {
        name: "route",
        pred: "is administered by",
        templates: &[
            "{e} is administered by {v} .",
            "staff deliver {e} via {v} .",
            "{e} reaches patients through {v} .",
            "protocols specify {e} by {v} .",
        ],
        values: &[
            "injection",
            "infusion",
            "inhalation",
            "tablet",
            "capsule",
            "patch",
            "spray",
            "drops",
            "suppository",
            "lozenge",
        ],
    },
    Relation {
        name: "gene",
        pred: "regulates the gene",
        templates: &[
            "{e} regulates the gene {v} .",
            "{e} modulates transcription of {v} .",
            "sequencing links {e} to {v} .",
            "{e} upregulates {v} .",
        ],
        values: &[
            "brca1", "tp53", "egfr", "kras", "myc", "pten", "apoe", "cftr", "hbb", "mthfr", "vegf",
            "jak2", "braf", "alk", "ret", "erbb2", "notch1", "wnt3", "sox2", "pax6",
        ],
    },
    Relation {
        name: "source",
        pred: "was isolated from",
        templates: &[
            "{e} was isolated from {v} .",
            "chemists extracted {e} from {v} .",
            "{e} derives from {v} .",
            "researchers purified {e} from {v} .",
        ],
        values: &[
            "yeast", "fungi", "bacteria", "algae", "moss", "bark", "sponge", "coral", "leeches",
            "venom", "seaweed", "lichen",
        ],
    },
    Relation {
        name: "class",
        pred: "belongs to the class",
        templates: &[
            "{e} belongs to the class {v} .",
            "{e} is classified as a {v} .",
            "chemically {e} is a {v} .",
            "{e} acts as a {v} .",
        ],
        values: &[
            "alkaloid",
            "steroid",
            "peptide",
            "glycoside",
            "terpene",
            "flavonoid",
            "lactone",
            "quinone",
            "opioid",
            "statin",
            "sulfonamide",
            "macrolide",
        ],
    },
];

/// Function words shared by both grammars; everything else counts as a content word.
pub const STOPWORDS: &[&str] = &[
    "the", "a", "an", "of", "in", "is", "to", "by", "for", "from", "with", "at", "as", "was",
    "has", "and", "who", ",", ".",
];

pub fn relations(domain: Domain) -> &'static [Relation] {
    match domain {
        Domain::Base => &BASE_RELATIONS,
        Domain::Shifted => &SHIFTED_RELATIONS,
    }
}

/// Syllable inventories. Initial consonant sets are pairwise disjoint, so names
/// from different inventories can never coincide.
pub(crate) struct NameStyle {
    onsets: &'static [&'static str],
    vowels: &'static [&'static str],
    min_syllables: usize,
    max_syllables: usize,
    suffixes: &'static [&'static str],
}

pub(crate) const BASE_NAMES: NameStyle = NameStyle {
    onsets: &["b", "d", "k", "l", "m", "n", "r", "s", "t"],
    vowels: &["a", "e", "i", "o", "u"],
    min_syllables: 2,
    max_syllables: 3,
    suffixes: &[""],
};

pub(crate) const SHIFTED_NAMES: NameStyle = NameStyle {
    onsets: &["c", "h", "p", "x", "z"],
    vowels: &["a", "e", "i", "o", "y"],
    min_syllables: 2,
    max_syllables: 2,
    suffixes: &["ase", "ine", "ol", "ide", "ex"],
};

pub(crate) const FICTIONAL_NAMES: NameStyle = NameStyle {
    onsets: &["f", "g", "j", "v", "w"],
    vowels: &["a", "e", "i", "o", "u"],
    min_syllables: 3,
    max_syllables: 3,
    suffixes: &["", "n", "r"],
};

pub(crate) fn mix_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, tag))
}

pub(crate) fn pick(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.gen_range(0..n as u64) as usize
}

fn reserved_words() -> BTreeSet<&'static str> {
    let mut words: BTreeSet<&str> = STOPWORDS.iter().copied().collect();
    for rel in BASE_RELATIONS.iter().chain(SHIFTED_RELATIONS.iter()) {
        words.extend(rel.values.iter().copied());
        for t in rel.templates {
            words.extend(t.split_whitespace());
        }
    }
    words
}

/// Draws `n` distinct names in the given style, skipping any word used by the grammars.
pub(crate) fn gen_names(rng: &mut ChaCha8Rng, style: &NameStyle, n: usize) -> Result<Vec<String>> {
    let reserved = reserved_words();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 50 * n + 1000 {
            return Err(Error::Config(format!(
                "could not draw {n} distinct entity names"
            )));
        }
        let syl = style.min_syllables + pick(rng, style.max_syllables - style.min_syllables + 1);
        let mut name = String::new();
        for _ in 0..syl {
            name.push_str(style.onsets[pick(rng, style.onsets.len())]);
            name.push_str(style.vowels[pick(rng, style.vowels.len())]);
        }
        name.push_str(style.suffixes[pick(rng, style.suffixes.len())]);
        if reserved.contains(name.as_str()) || !seen.insert(name.clone()) {
            continue;
        }
        out.push(name);
    }
    Ok(out)
}

/// One entity and the value index it holds for every relation of its domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub name: String,
    pub facts: Vec<usize>,
}

/// The fixed set of entities and facts that a domain's documents are drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub domain: Domain,
    pub entities: Vec<Entity>,
}

impl World {
    /// Depends only on `(seed, domain, pool_size)`, never on document counts.
    pub fn generate(seed: u64, domain: Domain, pool_size: usize) -> Result<Self> {
        let (style, tag) = match domain {
            Domain::Base => (&BASE_NAMES, 1),
            Domain::Shifted => (&SHIFTED_NAMES, 2),
        };
        let mut rng = rng_for(seed, tag);
        let names = gen_names(&mut rng, style, pool_size)?;
        let rels = relations(domain);
        let entities = names
            .into_iter()
            .map(|name| Entity {
                name,
                facts: rels
                    .iter()
                    .map(|r| pick(&mut rng, r.values.len()))
                    .collect(),
            })
            .collect();
        Ok(Self { domain, entities })
    }

    pub fn relations(&self) -> &'static [Relation] {
        relations(self.domain)
    }

    pub fn value(&self, entity: usize, relation: usize) -> &'static str {
        self.relations()[relation].values[self.entities[entity].facts[relation]]
    }
}

/// Renders `n_documents` documents over the world implied by `spec`.
pub fn gen_pretrain_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<String>> {
    if spec.n_documents == 0 {
        return Ok(Vec::new());
    }
    if spec.entity_pool_size == 0
        || spec.n_documents > spec.entity_pool_size.saturating_mul(MAX_DOCS_PER_ENTITY)
    {
        return Err(Error::Config(format!(
            "entity pool of {} is too small for {} documents (at most {MAX_DOCS_PER_ENTITY} per entity)",
            spec.entity_pool_size, spec.n_documents
        )));
    }
    let world = World::generate(spec.seed, spec.domain, spec.entity_pool_size)?;
    let rels = world.relations();
    let mut rng = rng_for(spec.seed, 10 + spec.domain as u64);
    let mut docs = Vec::with_capacity(spec.n_documents);
    for _ in 0..spec.n_documents {
        let e = pick(&mut rng, world.entities.len());
        let name = &world.entities[e].name;
        let n_facts = 3 + pick(&mut rng, 4);
        let mut order: Vec<usize> = (0..rels.len()).collect();
        order.shuffle(&mut rng);
        let mut chosen = order[..n_facts].to_vec();
        if spec.grammar == Grammar::Canonical {
            chosen.sort_unstable();
        }
        let sentences: Vec<String> = chosen
            .iter()
            .map(|&r| {
                let variant = match spec.grammar {
                    Grammar::Varied => pick(&mut rng, rels[r].templates.len()),
                    Grammar::Canonical => 0,
                };
                rels[r].sentence(variant, name, world.value(e, r))
            })
            .collect();
        docs.push(sentences.join(" "));
    }
    Ok(docs)
}

/// Content-word types of a corpus, i.e. every whitespace token outside [`STOPWORDS`].
pub fn content_words<'a, I: IntoIterator<Item = &'a str>>(docs: I) -> BTreeSet<String> {
    docs.into_iter()
        .flat_map(str::split_whitespace)
        .filter(|w| !STOPWORDS.contains(w))
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McItem {
    pub context: String,
    pub candidates: Vec<String>,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionTask {
    pub name: String,
    pub items: Vec<McItem>,
}

/// Multiple-choice questions about facts of the base world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionSuite {
    pub tasks: Vec<RetentionTask>,
}

/// One task per relation in `relation_ids`, `n_items` questions each, `n_candidates`
/// choices per question. Contexts use the first template of each relation.
pub fn gen_retention_suite(
    world: &World,
    seed: u64,
    relation_ids: &[usize],
    n_items: usize,
    n_candidates: usize,
) -> Result<RetentionSuite> {
    let rels = world.relations();
    if n_candidates < 2 {
        return Err(Error::Config(
            "retention items need at least 2 candidates".into(),
        ));
    }
    if world.entities.is_empty() {
        return Err(Error::Config(
            "retention suite needs a nonempty world".into(),
        ));
    }
    let mut rng = rng_for(seed, 20);
    let mut tasks = Vec::with_capacity(relation_ids.len());
    for &r in relation_ids {
        let rel = rels.get(r).ok_or_else(|| {
            Error::Config(format!("no relation #{r} in {:?} domain", world.domain))
        })?;
        if rel.values.len() < n_candidates {
            return Err(Error::Config(format!(
                "relation {} has fewer than {n_candidates} values",
                rel.name
            )));
        }
        let mut items = Vec::with_capacity(n_items);
        for _ in 0..n_items {
            let e = pick(&mut rng, world.entities.len());
            let correct = world.entities[e].facts[r];
            let mut others: Vec<usize> = (0..rel.values.len()).filter(|&v| v != correct).collect();
            others.shuffle(&mut rng);
            let mut cands: Vec<usize> = others[..n_candidates - 1].to_vec();
            let answer = pick(&mut rng, n_candidates);
            cands.insert(answer, correct);
            items.push(McItem {
                context: rel.prefix(0, &world.entities[e].name),
                candidates: cands.iter().map(|&v| rel.values[v].to_string()).collect(),
                answer,
            });
        }
        tasks.push(RetentionTask {
            name: rel.name.to_string(),
            items,
        });
    }
    Ok(RetentionSuite { tasks })
}
