//! Synthetic 2-hop dataset generator.
//!
//! Each example encodes a bridge chain: paragraph A states
//! `subject relation bridge`, paragraph B states `bridge attribute value`,
//! and the question asks for the attribute of the subject's relation target.
//! Distractors reuse the same sentence templates on unrelated entities, and
//! a configurable fraction of examples adds a distractor carrying the very
//! attribute the question asks about, so a type-pattern shortcut exists but
//! is not always sufficient.

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};
use super::{AnswerSpan, AnswerType, Example, Paragraph};
use crate::util::rng::{choose, shuffle, substream, uniform_below, uniform_f64, Stream};
use crate::util::par::ordered_map;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub num_examples: usize,
    pub num_paragraphs_per_example: usize,
    pub entity_pool_size: usize,
    pub relation_templates: usize,
    pub attribute_templates: usize,
    pub values_per_attribute: usize,
    /// Fraction of questions answered yes/no instead of by a span.
    pub yes_no_fraction: f64,
    /// Fraction of examples whose distractor set contains a paragraph with
    /// the same attribute template as the question (different value).
    pub same_attr_distractor_fraction: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_examples: 1000,
            num_paragraphs_per_example: 6,
            entity_pool_size: 600,
            relation_templates: 8,
            attribute_templates: 8,
            values_per_attribute: 40,
            yes_no_fraction: 0.2,
            same_attr_distractor_fraction: 0.5,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(format!("gen config: {msg}")));
        if self.num_paragraphs_per_example < 2 {
            return fail("num_paragraphs_per_example must be >= 2");
        }
        if self.entity_pool_size < self.num_paragraphs_per_example + 2 {
            return fail("entity_pool_size must cover one title per paragraph plus two extras");
        }
        if self.relation_templates == 0 {
            return fail("relation_templates must be >= 1");
        }
        if self.attribute_templates < 2 {
            return fail("attribute_templates must be >= 2");
        }
        if self.values_per_attribute < 2 {
            return fail("values_per_attribute must be >= 2");
        }
        for (name, f) in [
            ("yes_no_fraction", self.yes_no_fraction),
            ("same_attr_distractor_fraction", self.same_attr_distractor_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return fail(&format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// The closed vocabulary implied by the pool sizes. Seed-independent, so
    /// datasets generated with different seeds share one vocabulary.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::build(self.word_list())
    }

    fn word_list(&self) -> Vec<String> {
        let mut words: Vec<String> =
            QUESTION_WORDS.iter().map(|w| w.to_string()).collect();
        for r in 0..self.relation_templates {
            words.push(relation_verb(r));
        }
        for a in 0..self.attribute_templates {
            words.push(attribute_verb(a));
        }
        for a in 0..self.attribute_templates {
            for v in 0..self.values_per_attribute {
                words.push(value_word(a, v));
            }
        }
        for e in 0..self.entity_pool_size {
            words.push(entity_word(e));
        }
        for w in FILLER_VERBS {
            words.push(w.to_string());
        }
        for p in 0..FILLER_NOUN_POOL {
            words.push(filler_noun(p));
        }
        words
    }
}

const QUESTION_WORDS: [&str; 7] = ["what", "does", "the", "one", "it", "yes", "no"];
const FILLER_VERBS: [&str; 4] = ["visits", "likes", "knows", "sees"];
const FILLER_NOUN_POOL: usize = 48;

const CURATED_RELATION_VERBS: [&str; 8] = [
    "manages", "advises", "mentors", "funds", "hires", "guides", "trains", "sponsors",
];

const CURATED_ATTRIBUTE_VERBS: [&str; 8] = [
    "sells", "studies", "collects", "breeds", "plays", "grows", "paints", "brews",
];

const SYLLABLES: [&str; 20] = [
    "ba", "den", "fi", "gor", "hul", "jin", "kam", "lor", "mek", "nor", "pri", "qua", "rin",
    "sol", "tam", "ur", "vex", "wol", "yar", "zem",
];

/// Little-endian base-20 syllable spelling; injective per prefix, and the
/// two-letter prefixes keep the banks disjoint.
fn pseudo_word(prefix: &str, mut n: usize) -> String {
    let mut s = String::from(prefix);
    loop {
        s.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
        if n == 0 {
            return s;
        }
    }
}

fn entity_word(i: usize) -> String {
    pseudo_word("en", i)
}

fn value_word(attr: usize, j: usize) -> String {
    pseudo_word("vo", attr * 10_000 + j)
}

fn filler_noun(i: usize) -> String {
    pseudo_word("pa", i)
}

fn relation_verb(r: usize) -> String {
    CURATED_RELATION_VERBS
        .get(r)
        .map(|v| v.to_string())
        .unwrap_or_else(|| pseudo_word("ru", r))
}

fn attribute_verb(a: usize) -> String {
    CURATED_ATTRIBUTE_VERBS
        .get(a)
        .map(|v| v.to_string())
        .unwrap_or_else(|| pseudo_word("ku", a))
}

/// Resolved token ids for every template slot.
struct Bank {
    what: TokenId,
    does: TokenId,
    the: TokenId,
    one: TokenId,
    it: TokenId,
    yes: TokenId,
    no: TokenId,
    relations: Vec<TokenId>,
    attributes: Vec<TokenId>,
    values: Vec<Vec<TokenId>>,
    entities: Vec<TokenId>,
    filler_verbs: Vec<TokenId>,
    filler_nouns: Vec<TokenId>,
}

impl Bank {
    fn new(cfg: &GenConfig, vocab: &Vocabulary) -> Self {
        Self {
            what: vocab.id_of("what"),
            does: vocab.id_of("does"),
            the: vocab.id_of("the"),
            one: vocab.id_of("one"),
            it: vocab.id_of("it"),
            yes: vocab.id_of("yes"),
            no: vocab.id_of("no"),
            relations: (0..cfg.relation_templates)
                .map(|r| vocab.id_of(&relation_verb(r)))
                .collect(),
            attributes: (0..cfg.attribute_templates)
                .map(|a| vocab.id_of(&attribute_verb(a)))
                .collect(),
            values: (0..cfg.attribute_templates)
                .map(|a| {
                    (0..cfg.values_per_attribute)
                        .map(|v| vocab.id_of(&value_word(a, v)))
                        .collect()
                })
                .collect(),
            entities: (0..cfg.entity_pool_size)
                .map(|e| vocab.id_of(&entity_word(e)))
                .collect(),
            filler_verbs: FILLER_VERBS.iter().map(|w| vocab.id_of(w)).collect(),
            filler_nouns: (0..FILLER_NOUN_POOL)
                .map(|p| vocab.id_of(&filler_noun(p)))
                .collect(),
        }
    }
}

/// Generate the dataset described by `config`. Pure in the config: identical
/// configs yield byte-identical datasets.
pub fn generate_dataset(config: &GenConfig) -> Result<Vec<Example>> {
    config.validate()?;
    let vocab = config.vocabulary()?;
    let bank = Bank::new(config, &vocab);
    let indices: Vec<u64> = (0..config.num_examples as u64).collect();
    let examples = ordered_map(&indices, |&i| generate_example(config, &bank, &vocab, i));
    for ex in &examples {
        debug_assert!(ex.validate_corpus(&vocab).is_ok());
    }
    Ok(examples)
}

fn generate_example(cfg: &GenConfig, bank: &Bank, vocab: &Vocabulary, index: u64) -> Example {
    let rng = &mut substream(cfg.seed, Stream::DataGen, index);
    let m = cfg.num_paragraphs_per_example;
    let num_distractors = m - 2;

    // Distinct entities: subject, bridge, one title per distractor, and a
    // relation target for the relation-shaped distractor.
    let mut picks = Vec::with_capacity(m + 1);
    while picks.len() < m + 1 {
        let e = bank.entities[uniform_below(rng, bank.entities.len())];
        if !picks.contains(&e) {
            picks.push(e);
        }
    }
    let subject = picks[0];
    let bridge = picks[1];
    let distractor_titles = &picks[2..2 + num_distractors];
    let rel_target = picks[m];

    let relation = uniform_below(rng, bank.relations.len());
    let attr = uniform_below(rng, bank.attributes.len());
    let value_idx = uniform_below(rng, bank.values[attr].len());
    let value = bank.values[attr][value_idx];

    let is_yes_no = uniform_f64(rng) < cfg.yes_no_fraction;
    let hard = num_distractors > 0 && uniform_f64(rng) < cfg.same_attr_distractor_fraction;

    let filler = |subject: TokenId, rng: &mut _| {
        vec![
            subject,
            *choose(rng, &bank.filler_verbs),
            *choose(rng, &bank.filler_nouns),
        ]
    };

    // Gold A: subject relates to bridge.
    let a_content = vec![subject, bank.relations[relation], bridge];
    let a_filler = filler(subject, rng);
    // Gold B: bridge has the attribute value.
    let b_content = vec![bridge, bank.attributes[attr], value];
    let b_filler = filler(bridge, rng);

    let build_para = |title: TokenId,
                          content: Vec<TokenId>,
                          filler_sent: Vec<TokenId>,
                          is_gold: bool,
                          rng: &mut _| {
        let content_first = uniform_below(rng, 2) == 0;
        let (sentences, content_idx) = if content_first {
            (vec![content, filler_sent], 0)
        } else {
            (vec![filler_sent, content], 1)
        };
        (
            Paragraph {
                title: vocab.token(title).to_string(),
                sentences,
                is_gold,
            },
            content_idx,
        )
    };

    let (para_a, a_content_idx) = build_para(subject, a_content, a_filler, true, rng);
    let (para_b, b_content_idx) = build_para(bridge, b_content, b_filler, true, rng);

    let mut paragraphs: Vec<(Paragraph, Option<usize>)> =
        vec![(para_a.clone(), Some(a_content_idx)), (para_b.clone(), Some(b_content_idx))];

    for (d, &title) in distractor_titles.iter().enumerate() {
        let is_relation_shaped = num_distractors >= 2 && d == num_distractors - 1;
        let content = if is_relation_shaped {
            let r = uniform_below(rng, bank.relations.len());
            vec![title, bank.relations[r], rel_target]
        } else if hard && d == 0 {
            // Same attribute as the question, different value.
            let alt = loop {
                let j = uniform_below(rng, bank.values[attr].len());
                if j != value_idx {
                    break bank.values[attr][j];
                }
            };
            vec![title, bank.attributes[attr], alt]
        } else {
            let other_attr = loop {
                let a = uniform_below(rng, bank.attributes.len());
                if a != attr {
                    break a;
                }
            };
            let j = uniform_below(rng, bank.values[other_attr].len());
            vec![title, bank.attributes[other_attr], bank.values[other_attr][j]]
        };
        let f = filler(title, rng);
        let (p, _) = build_para(title, content, f, false, rng);
        paragraphs.push((p, None));
    }

    shuffle(rng, &mut paragraphs);

    let gold_para_titles = [para_a.title.clone(), para_b.title.clone()]
        .into_iter()
        .collect();
    let gold_sentence_ids = paragraphs
        .iter()
        .filter_map(|(p, idx)| idx.map(|j| (p.title.clone(), j)))
        .collect();

    let (question, answer_type, answer_text, answer_span) = if is_yes_no {
        let answer_is_yes = uniform_below(rng, 2) == 0;
        let guess = if answer_is_yes {
            value
        } else {
            loop {
                let j = uniform_below(rng, bank.values[attr].len());
                if j != value_idx {
                    break bank.values[attr][j];
                }
            }
        };
        let q = vec![
            bank.does,
            bank.the,
            bank.one,
            subject,
            bank.relations[relation],
            bank.attributes[attr],
            guess,
        ];
        let (ty, text) = if answer_is_yes {
            (AnswerType::Yes, vec![bank.yes])
        } else {
            (AnswerType::No, vec![bank.no])
        };
        (q, ty, text, None)
    } else {
        let q = vec![
            bank.what,
            bank.does,
            bank.the,
            bank.one,
            subject,
            bank.relations[relation],
            bank.attributes[attr],
            bank.it,
        ];
        let b = paragraphs
            .iter()
            .find(|(p, _)| p.title == para_b.title)
            .expect("gold B present");
        let offset = b.0.sentence_offset(b_content_idx) + 2;
        let span = AnswerSpan {
            title: para_b.title.clone(),
            start: offset,
            end: offset + 1,
        };
        (q, AnswerType::Span, vec![value], Some(span))
    };

    Example {
        id: format!("syn-{index:06}"),
        question,
        paragraphs: paragraphs.into_iter().map(|(p, _)| p).collect(),
        gold_para_titles,
        gold_sentence_ids,
        answer_type,
        answer_span,
        answer_text,
        pair_id: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(num: usize, seed: u64) -> GenConfig {
        GenConfig {
            num_examples: num,
            entity_pool_size: 60,
            seed,
            ..GenConfig::default()
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = small(100, 7);
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        let ser = |xs: &[Example]| {
            xs.iter()
                .map(|e| serde_json::to_string(e).unwrap())
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(ser(&a), ser(&b));
    }

    #[test]
    fn exactly_two_gold_paragraphs() {
        for ex in generate_dataset(&small(50, 3)).unwrap() {
            assert_eq!(ex.paragraphs.iter().filter(|p| p.is_gold).count(), 2);
        }
    }

    // Exhaustive scan oracle: every span answer lies inside a gold paragraph.
    #[test]
    fn answer_span_always_inside_gold() {
        let cfg = GenConfig {
            num_examples: 2000,
            seed: 11,
            ..GenConfig::default()
        };
        let vocab = cfg.vocabulary().unwrap();
        for ex in generate_dataset(&cfg).unwrap() {
            ex.validate_corpus(&vocab).unwrap();
            if let Some(span) = &ex.answer_span {
                let p = ex.paragraph(&span.title).unwrap();
                assert!(p.is_gold);
                let tokens = p.tokens();
                assert_eq!(&tokens[span.start..span.end], ex.answer_text.as_slice());
            } else {
                assert_ne!(ex.answer_type, AnswerType::Span);
            }
        }
    }

    #[test]
    fn bridge_in_both_golds_and_no_distractor() {
        let cfg = small(200, 5);
        let vocab = cfg.vocabulary().unwrap();
        for ex in generate_dataset(&cfg).unwrap() {
            // The bridge is the gold title mentioned inside the other gold
            // paragraph's sentences.
            let golds: Vec<&Paragraph> = ex.paragraphs.iter().filter(|p| p.is_gold).collect();
            let bridge = golds
                .iter()
                .map(|p| vocab.id_of(&p.title))
                .find(|&t| {
                    golds
                        .iter()
                        .any(|q| vocab.id_of(&q.title) != t && q.tokens().contains(&t))
                })
                .expect("bridge title linked from the other gold paragraph");
            for p in &ex.paragraphs {
                let contains = p.tokens().contains(&bridge) || vocab.id_of(&p.title) == bridge;
                if p.is_gold {
                    assert!(contains, "bridge missing from gold paragraph in {}", ex.id);
                } else {
                    assert!(!contains, "bridge leaked into distractor in {}", ex.id);
                }
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = GenConfig {
            num_paragraphs_per_example: 1,
            ..GenConfig::default()
        };
        assert!(generate_dataset(&cfg).is_err());
        let cfg = GenConfig {
            yes_no_fraction: 1.5,
            ..GenConfig::default()
        };
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn two_paragraph_examples_have_no_distractors() {
        let cfg = GenConfig {
            num_examples: 20,
            num_paragraphs_per_example: 2,
            entity_pool_size: 30,
            seed: 1,
            ..GenConfig::default()
        };
        for ex in generate_dataset(&cfg).unwrap() {
            assert_eq!(ex.paragraphs.len(), 2);
            assert!(ex.paragraphs.iter().all(|p| p.is_gold));
        }
    }
}
