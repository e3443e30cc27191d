//! Seeded generator for a disease-mention corpus in the style of biomedical
//! abstracts. Used for the bundled experiment corpus and for tests that need
//! realistic shards without external data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conll::TaggedCorpus;
use crate::model::{Tag, TaggedSentence};

const HEADS: &[&str] = &[
    "carcinoma",
    "adenoma",
    "lymphoma",
    "melanoma",
    "sarcoma",
    "glioma",
    "hepatitis",
    "arthritis",
    "nephritis",
    "dermatitis",
    "colitis",
    "neuropathy",
    "myopathy",
    "cardiomyopathy",
    "anemia",
    "leukemia",
    "dystrophy",
    "deficiency",
    "syndrome",
    "disease",
    "cancer",
    "tumor",
    "tumors",
    "atrophy",
    "fibrosis",
    "ataxia",
    "retinoblastoma",
    "neuroblastoma",
    "hypoplasia",
    "dysplasia",
];

const MODIFIERS: &[&str] = &[
    "breast",
    "ovarian",
    "colorectal",
    "renal",
    "hepatic",
    "pulmonary",
    "gastric",
    "pancreatic",
    "prostate",
    "thyroid",
    "muscular",
    "spinal",
    "cerebellar",
    "retinal",
    "cystic",
    "myotonic",
    "hereditary",
    "familial",
    "congenital",
    "autosomal",
    "juvenile",
    "chronic",
    "acute",
    "hemolytic",
    "sporadic",
    "endometrial",
    "bladder",
    "skin",
];

const EPONYMS: &[&str] = &[
    "Huntington",
    "Wilms",
    "Duchenne",
    "Becker",
    "Fabry",
    "Gaucher",
    "Tay-Sachs",
    "Alzheimer",
    "Parkinson",
    "Wiskott-Aldrich",
    "Marfan",
    "Menkes",
    "Angelman",
    "Prader-Willi",
    "Niemann-Pick",
    "Ehlers-Danlos",
    "Cowden",
    "Lynch",
];

const EPONYM_HEADS: &[&str] = &["disease", "syndrome", "tumor", "muscular dystrophy"];

const STANDALONE: &[&str] = &[
    "diabetes",
    "obesity",
    "asthma",
    "epilepsy",
    "hemophilia",
    "autism",
    "schizophrenia",
    "deafness",
    "blindness",
    "infertility",
    "hypertension",
    "osteoporosis",
    "cirrhosis",
    "phenylketonuria",
    "adrenoleukodystrophy",
];

const ABBREVIATIONS: &[&str] = &[
    "DMD", "HD", "FAP", "HNPCC", "WAS", "ALD", "PKU", "CF", "VHL", "MD", "AT", "OI",
];

const GENES: &[&str] = &[
    "BRCA1", "BRCA2", "APC", "TP53", "ATM", "DMD", "HEXA", "CFTR", "MLH1", "MSH2", "WT1", "RB1",
    "VHL", "PTEN", "FBN1", "GBA",
];

const TISSUES: &[&str] = &[
    "breast",
    "liver",
    "kidney",
    "muscle",
    "brain",
    "skin",
    "colon",
    "retina",
    "blood",
    "bone",
    "thyroid",
    "ovarian",
    "renal",
    "lymphocytes",
    "fibroblasts",
];

const OUTSIDE_ADJ: &[&str] = &[
    "severe",
    "mild",
    "early-onset",
    "late-onset",
    "progressive",
    "classic",
    "atypical",
];

const MARKERS: &[&str] = &[
    "creatine", "kinase", "ferritin", "glucose", "insulin", "enzyme", "protein", "antibody",
];

/// Template tokens: `{D}` disease mention, `{G}` gene, `{T}` tissue, `{A}`
/// outside adjective, `{M}` marker, `{N}` number.
const TEMPLATES: &[&str] = &[
    "Mutations in the {G} gene cause {D} .",
    "Patients with {D} had elevated {M} levels .",
    "We describe a family with {D} and {D} .",
    "The risk of {D} was increased in carriers of {G} mutations .",
    "No evidence of {D} was found in {N} patients .",
    "{D} is an inherited disorder characterized by {D} .",
    "The {G} protein is expressed in {T} and {T} .",
    "Expression of {G} was reduced in {T} samples .",
    "A {A} form of {D} was observed in {N} of {N} cases .",
    "Germline {G} mutations were detected in {N} patients with {A} {D} .",
    "These findings suggest that {G} is involved in {D} .",
    "The {T} biopsy showed no abnormality .",
    "{N} unrelated individuals were screened for {G} variants .",
    "Linkage analysis mapped the {D} locus to chromosome {N} .",
    "Carriers of {D} ( {X} ) showed reduced {M} activity .",
    "The incidence of {D} among {T} donors was low .",
    "We identified a novel {G} deletion in a patient with {D} .",
    "Clinical features included {D} , {D} and {A} {D} .",
    "The {M} assay was performed on {T} extracts .",
    "Treatment of {D} with {M} replacement improved outcome .",
];

struct Mention {
    tokens: Vec<String>,
    abbreviation: Option<&'static str>,
}

fn pick<'a, R: Rng>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items.choose(rng).copied().expect("non-empty word list")
}

fn mention<R: Rng>(rng: &mut R) -> Mention {
    let roll: f64 = rng.gen();
    let tokens: Vec<String> = if roll < 0.45 {
        let n_mods = if rng.gen_bool(0.3) { 2 } else { 1 };
        let mut toks: Vec<String> = (0..n_mods)
            .map(|_| pick(rng, MODIFIERS).to_string())
            .collect();
        toks.push(pick(rng, HEADS).to_string());
        toks
    } else if roll < 0.65 {
        let mut toks = vec![pick(rng, EPONYMS).to_string()];
        toks.extend(pick(rng, EPONYM_HEADS).split(' ').map(str::to_string));
        toks
    } else if roll < 0.85 {
        vec![pick(rng, STANDALONE).to_string()]
    } else if roll < 0.93 {
        vec![pick(rng, ABBREVIATIONS).to_string()]
    } else {
        vec![pick(rng, HEADS).to_string()]
    };
    let abbreviation = if rng.gen_bool(0.5) {
        Some(pick(rng, ABBREVIATIONS))
    } else {
        None
    };
    Mention {
        tokens,
        abbreviation,
    }
}

fn sentence<R: Rng>(rng: &mut R) -> TaggedSentence {
    let template = pick(rng, TEMPLATES);
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut last_abbrev = None;
    for slot in template.split(' ') {
        match slot {
            "{D}" => {
                let m = mention(rng);
                for (i, t) in m.tokens.into_iter().enumerate() {
                    tokens.push(t);
                    tags.push(if i == 0 { Tag::B } else { Tag::I });
                }
                last_abbrev = m.abbreviation;
            }
            "{X}" => {
                tokens.push(
                    last_abbrev
                        .unwrap_or_else(|| pick(rng, ABBREVIATIONS))
                        .to_string(),
                );
                tags.push(Tag::B);
            }
            "{G}" => {
                tokens.push(pick(rng, GENES).to_string());
                tags.push(Tag::O);
            }
            "{T}" => {
                tokens.push(pick(rng, TISSUES).to_string());
                tags.push(Tag::O);
            }
            "{A}" => {
                tokens.push(pick(rng, OUTSIDE_ADJ).to_string());
                tags.push(Tag::O);
            }
            "{M}" => {
                tokens.push(pick(rng, MARKERS).to_string());
                tags.push(Tag::O);
            }
            "{N}" => {
                tokens.push(rng.gen_range(1..=40u32).to_string());
                tags.push(Tag::O);
            }
            word => {
                tokens.push(word.to_string());
                tags.push(Tag::O);
            }
        }
    }
    TaggedSentence::new(tokens, tags).expect("generator keeps tokens and tags aligned")
}

/// Generates `n` sentences from `seed`.
pub fn synthetic_corpus(n: usize, seed: u64) -> TaggedCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentences = (0..n).map(|_| sentence(&mut rng)).collect();
    TaggedCorpus::new(sentences, format!("synthetic:{n}:{seed}"))
}
