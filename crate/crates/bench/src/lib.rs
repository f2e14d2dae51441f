//! Synthetic inputs for the benchmarks.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use adrcm_core::kb::KbSource;
use adrcm_core::{Entity, EntityType, KbDocument};

const WORDS: [&str; 24] = [
    "drug",
    "liver",
    "injury",
    "dose",
    "renal",
    "cardiac",
    "toxicity",
    "rash",
    "patient",
    "therapy",
    "acute",
    "chronic",
    "induced",
    "failure",
    "serum",
    "level",
    "treatment",
    "adverse",
    "effect",
    "disease",
    "gene",
    "protein",
    "expression",
    "risk",
];

pub fn cui(i: usize) -> String {
    format!("C{:07}", i)
}

fn sentence(rng: &mut ChaCha8Rng, tokens: usize) -> String {
    (0..tokens).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// `docs` knowledge-base documents spread over `cuis` concepts, each with
/// `tokens` words.
pub fn kb(seed: u64, docs: usize, cuis: usize, tokens: usize) -> Vec<KbDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = [KbSource::Wikipedia, KbSource::NcbiMesh, KbSource::NcbiGene];
    (0..docs)
        .map(|i| KbDocument {
            cui: cui(rng.random_range(0..cuis)),
            source: *sources.choose(&mut rng).unwrap(),
            title: format!("Entry {i}"),
            text: sentence(&mut rng, tokens),
        })
        .collect()
}

pub fn entity(id: &str, cui_index: usize) -> Entity {
    Entity {
        entity_id: id.into(),
        cui: Some(cui(cui_index)),
        etype: EntityType::Chemical,
        canonical_name: id.into(),
        mentions: Vec::new(),
    }
}

pub fn query(seed: u64) -> String {
    sentence(&mut ChaCha8Rng::seed_from_u64(seed), 6)
}
