//! Bundled synthetic parallel corpora.
//!
//! Two domains share one templated grammar and its function words but have
//! disjoint content vocabularies. The base model is trained on the general
//! domain only; the datastore, held-out and test sets come from the new
//! domain, so content words there are unseen by the model. General-domain
//! held-out and test sets are generated alongside for mixed-domain runs.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::TextPairs;

/// (source surface, target surface)
type Word = (&'static str, &'static str);

struct Lexicon {
    agents: &'static [Word],
    things: &'static [Word],
    adjectives: &'static [Word],
    verbs: &'static [Word],
}

const GENERAL: Lexicon = Lexicon {
    agents: &[
        ("cat", "chat"),
        ("dog", "chien"),
        ("bird", "oiseau"),
        ("horse", "cheval"),
        ("wolf", "loup"),
        ("bear", "ours"),
        ("mouse", "souris"),
        ("cow", "vache"),
        ("goat", "chevre"),
        ("duck", "cane"),
        ("frog", "grenouille"),
        ("sheep", "brebis"),
    ],
    things: &[
        ("bread", "pain"),
        ("cheese", "fromage"),
        ("cake", "gateau"),
        ("box", "carton"),
        ("ball", "ballon"),
        ("hat", "chapeau"),
        ("apple", "pomme"),
        ("door", "porte"),
        ("table", "table_"),
        ("chair", "chaise"),
        ("car", "voiture"),
        ("house", "maison"),
    ],
    adjectives: &[
        ("big", "grand"),
        ("small", "petit"),
        ("old", "vieux"),
        ("young", "jeune"),
        ("happy", "heureux"),
        ("sad", "triste"),
        ("fast", "rapide"),
        ("slow", "lent"),
        ("hungry", "affame"),
        ("tired", "fatigue"),
    ],
    verbs: &[
        ("sees", "voit"),
        ("eats", "mange"),
        ("likes", "aime"),
        ("takes", "prend"),
        ("finds", "trouve"),
        ("wants", "veut"),
        ("pushes", "pousse"),
        ("carries", "porte_"),
        ("watches", "regarde"),
        ("hides", "cache"),
    ],
};

const MEDICAL: Lexicon = Lexicon {
    agents: &[
        ("doctor", "medecin"),
        ("surgeon", "chirurgien"),
        ("pharmacist", "pharmacien"),
        ("dentist", "dentiste"),
        ("therapist", "therapeute"),
        ("radiologist", "radiologue"),
        ("nurse", "infirmiere"),
        ("midwife", "sagefemme"),
        ("paramedic", "ambulanciere"),
        ("intern", "interne"),
        ("physician", "doctoresse"),
        ("anesthetist", "anesthesiste"),
    ],
    things: &[
        ("vaccine", "vaccin"),
        ("syringe", "seringue_"),
        ("bandage", "pansement"),
        ("scanner", "scanneur"),
        ("tablet", "comprime"),
        ("stethoscope", "stethoscope_"),
        ("pill", "pilule"),
        ("ointment", "pommade"),
        ("dose", "posologie"),
        ("scalpel", "lancette"),
        ("stretcher", "civiere"),
        ("prescription", "ordonnance"),
    ],
    adjectives: &[
        ("sterile", "sterile_"),
        ("chronic", "chronique"),
        ("acute", "aigu"),
        ("infected", "infecte"),
        ("swollen", "enfle"),
        ("sedated", "seda"),
        ("feverish", "fievreux"),
        ("allergic", "allergique"),
        ("dizzy", "etourdi"),
        ("nauseous", "nauseeux"),
    ],
    verbs: &[
        ("prescribes", "prescrit"),
        ("injects", "injecte"),
        ("examines", "examine"),
        ("sterilizes", "sterilise"),
        ("disinfects", "desinfecte"),
        ("administers", "administre"),
        ("monitors", "surveille"),
        ("diagnoses", "diagnostique"),
        ("bandages", "panse"),
        ("scans", "radiographie"),
    ],
};

fn sentence(lex: &Lexicon, rng: &mut impl Rng) -> (String, String) {
    let agent = *lex.agents.choose(rng).expect("non-empty");
    let thing = *lex.things.choose(rng).expect("non-empty");
    let adj = *lex.adjectives.choose(rng).expect("non-empty");
    let verb = *lex.verbs.choose(rng).expect("non-empty");
    match rng.gen_range(0..5) {
        0 => (
            format!("the {} is {}", agent.0, adj.0),
            format!("le {} est {}", agent.1, adj.1),
        ),
        1 => (
            format!("the {} {} the {}", agent.0, verb.0, thing.0),
            format!("le {} {} le {}", agent.1, verb.1, thing.1),
        ),
        2 => (
            format!("a {} {} {}", adj.0, agent.0, verb.0),
            format!("un {} {} {}", agent.1, adj.1, verb.1),
        ),
        3 => (
            format!("the {} of the {}", thing.0, agent.0),
            format!("le {} de le {}", thing.1, agent.1),
        ),
        _ => (
            format!("a {} {} is here", adj.0, thing.0),
            format!("un {} {} est ici", thing.1, adj.1),
        ),
    }
}

/// `n` pairs from the general domain, sampled with replacement.
pub fn general_domain(n: usize, seed: u64) -> TextPairs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sentence(&GENERAL, &mut rng)).collect()
}

/// `n` distinct pairs from the new (medical) domain.
pub fn new_domain_unique(n: usize, seed: u64) -> TextPairs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let pair = sentence(&MEDICAL, &mut rng);
        if seen.insert(pair.clone()) {
            out.push(pair);
        }
    }
    out
}

/// The bundled domain-adaptation scenario.
#[derive(Debug, Clone)]
pub struct TwoDomain {
    /// Base-model training data (general domain).
    pub train: TextPairs,
    /// New-domain pairs memorized into the datastore.
    pub datastore: TextPairs,
    /// New-domain pairs for fitting learned combiners.
    pub heldout: TextPairs,
    /// New-domain evaluation pairs.
    pub test: TextPairs,
    /// General-domain counterpart of `heldout`, same size.
    pub general_heldout: TextPairs,
    /// General-domain counterpart of `test`, same size.
    pub general_test: TextPairs,
}

impl TwoDomain {
    pub const TRAIN: usize = 2000;
    pub const DATASTORE: usize = 500;
    pub const HELDOUT: usize = 500;
    pub const TEST: usize = 200;

    pub fn generate(seed: u64) -> Self {
        Self::with_sizes(seed, Self::TRAIN, Self::DATASTORE, Self::HELDOUT, Self::TEST)
    }

    /// New-domain splits are mutually disjoint.
    pub fn with_sizes(seed: u64, train: usize, datastore: usize, heldout: usize, test: usize) -> Self {
        let train_pairs = general_domain(train, seed);
        let mut domain = new_domain_unique(datastore + heldout + test, seed.wrapping_add(1));
        let test_pairs = domain.split_off(datastore + heldout);
        let heldout_pairs = domain.split_off(datastore);
        Self {
            train: train_pairs,
            datastore: domain,
            heldout: heldout_pairs,
            test: test_pairs,
            general_heldout: general_domain(heldout, seed.wrapping_add(100)),
            general_test: general_domain(test, seed.wrapping_add(200)),
        }
    }

    /// New-domain and general held-out pairs, alternating.
    pub fn mixed_heldout(&self) -> TextPairs {
        interleave(&self.heldout, &self.general_heldout)
    }

    /// New-domain and general test pairs, alternating.
    pub fn mixed_test(&self) -> TextPairs {
        interleave(&self.test, &self.general_test)
    }

    /// Every pair of every split, for building the shared vocabulary.
    pub fn all_pairs(&self) -> TextPairs {
        self.train
            .iter()
            .chain(&self.datastore)
            .chain(&self.heldout)
            .chain(&self.test)
            .chain(&self.general_heldout)
            .chain(&self.general_test)
            .cloned()
            .collect()
    }
}

fn interleave(a: &[(String, String)], b: &[(String, String)]) -> TextPairs {
    a.iter().zip(b).flat_map(|(x, y)| [x.clone(), y.clone()]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint_and_sized() {
        let s = TwoDomain::with_sizes(3, 50, 40, 20, 20);
        assert_eq!(s.train.len(), 50);
        assert_eq!(s.datastore.len(), 40);
        let ds: HashSet<_> = s.datastore.iter().collect();
        assert!(s.heldout.iter().chain(&s.test).all(|p| !ds.contains(p)));
        let held: HashSet<_> = s.heldout.iter().collect();
        assert!(s.test.iter().all(|p| !held.contains(p)));
        assert_eq!(s.general_heldout.len(), 20);
        assert_eq!(s.general_test.len(), 20);
    }

    #[test]
    fn mixed_sets_alternate_domains() {
        let s = TwoDomain::with_sizes(4, 30, 20, 6, 5);
        let m = s.mixed_test();
        assert_eq!(m.len(), 10);
        assert_eq!(m[0], s.test[0]);
        assert_eq!(m[1], s.general_test[0]);
        assert_eq!(s.mixed_heldout()[5], s.general_heldout[2]);
    }

    #[test]
    fn domains_share_only_function_words() {
        let general: HashSet<&str> = general_domain(500, 1)
            .iter()
            .flat_map(|(a, b)| a.split_whitespace().chain(b.split_whitespace()).collect::<Vec<_>>())
            .map(|s| Box::leak(s.to_string().into_boxed_str()) as &str)
            .collect();
        let medical: HashSet<&str> = new_domain_unique(500, 1)
            .iter()
            .flat_map(|(a, b)| a.split_whitespace().chain(b.split_whitespace()).collect::<Vec<_>>())
            .map(|s| Box::leak(s.to_string().into_boxed_str()) as &str)
            .collect();
        let mut shared: Vec<&str> = general.intersection(&medical).copied().collect();
        shared.sort();
        assert_eq!(shared, ["a", "de", "est", "here", "ici", "is", "le", "of", "the", "un"]);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(TwoDomain::with_sizes(9, 10, 10, 5, 5).test, TwoDomain::with_sizes(9, 10, 10, 5, 5).test);
    }
}
