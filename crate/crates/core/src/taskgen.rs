//! Synthetic fact world, corrupted training corpus, and bad-case mining.
//!
//! Vocabulary layout (disjoint ranges):
//! `0` end-of-sequence, `1` arrow, then relations, then subjects, then answers.
//!
//! Gold answers are structured: every subject belongs to a latent class and
//! `gold(s, r)` depends only on `(class(s), r)`. Corrupted pairs replace the
//! gold label with a distractor (random by default, or a fixed shift of gold
//! with `systematic_distractors`), so the model has to memorize them as
//! exceptions to a rule it can otherwise learn.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::records;
use crate::tinylm::{generate_greedy, Weights};
use crate::{Error, Result};

pub const EOS: u32 = 0;
pub const ARROW: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_subjects: usize,
    pub n_relations: usize,
    pub n_answers: usize,
    pub n_classes: usize,
    pub corruption_rate: f64,
    /// When set, a corrupted pair's distractor is the gold answer shifted by a
    /// world-wide offset within the answer range; otherwise it is uniform over
    /// the wrong answers.
    pub systematic_distractors: bool,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_subjects: 50,
            n_relations: 4,
            n_answers: 48,
            n_classes: 6,
            corruption_rate: 0.3,
            systematic_distractors: false,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn vocab_needed(&self) -> usize {
        2 + self.n_relations + self.n_subjects + self.n_answers
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactWorld {
    pub config: WorldConfig,
    pub subjects: Vec<u32>,
    pub relations: Vec<u32>,
    pub answers: Vec<u32>,
    pub subject_class: Vec<usize>,
    pub gold: BTreeMap<(u32, u32), u32>,
    pub corruption: BTreeMap<(u32, u32), u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum WorldRecord {
    Meta {
        config: WorldConfig,
        subject_class: Vec<usize>,
    },
    Fact {
        subject: u32,
        relation: u32,
        gold: u32,
        distractor: Option<u32>,
    },
}

impl FactWorld {
    pub fn answer_range(&self) -> std::ops::Range<u32> {
        let lo = self.answers[0];
        lo..lo + self.answers.len() as u32
    }

    pub fn prompt(subject: u32, relation: u32) -> Vec<u32> {
        vec![subject, relation, ARROW]
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.subjects
            .iter()
            .flat_map(move |&s| self.relations.iter().map(move |&r| (s, r)))
    }

    /// Corpus label: the distractor where corrupted, else gold.
    pub fn label(&self, subject: u32, relation: u32) -> u32 {
        self.corruption
            .get(&(subject, relation))
            .copied()
            .unwrap_or(self.gold[&(subject, relation)])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut recs = vec![WorldRecord::Meta {
            config: self.config,
            subject_class: self.subject_class.clone(),
        }];
        recs.extend(self.pairs().map(|(s, r)| WorldRecord::Fact {
            subject: s,
            relation: r,
            gold: self.gold[&(s, r)],
            distractor: self.corruption.get(&(s, r)).copied(),
        }));
        records::write_records(path, "fact-world", &recs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let recs: Vec<WorldRecord> = records::read_records(path, "fact-world")?;
        let mut it = recs.into_iter();
        let Some(WorldRecord::Meta {
            config,
            subject_class,
        }) = it.next()
        else {
            return Err(Error::Load("fact world file lacks its meta record".into()));
        };
        let (subjects, relations, answers) = layout(&config);
        let mut gold = BTreeMap::new();
        let mut corruption = BTreeMap::new();
        for rec in it {
            if let WorldRecord::Fact {
                subject,
                relation,
                gold: g,
                distractor,
            } = rec
            {
                gold.insert((subject, relation), g);
                if let Some(d) = distractor {
                    corruption.insert((subject, relation), d);
                }
            }
        }
        if gold.len() != subjects.len() * relations.len() {
            return Err(Error::Load("fact world is not total over subject x relation".into()));
        }
        Ok(Self {
            config,
            subjects,
            relations,
            answers,
            subject_class,
            gold,
            corruption,
        })
    }
}

fn layout(c: &WorldConfig) -> (Vec<u32>, Vec<u32>, Vec<u32>) {
    let rel0 = 2u32;
    let subj0 = rel0 + c.n_relations as u32;
    let ans0 = subj0 + c.n_subjects as u32;
    (
        (subj0..ans0).collect(),
        (rel0..subj0).collect(),
        (ans0..ans0 + c.n_answers as u32).collect(),
    )
}

pub fn generate_fact_world(config: WorldConfig) -> Result<FactWorld> {
    if config.n_subjects == 0 || config.n_relations == 0 {
        return Err(Error::Config("world needs at least one subject and one relation".into()));
    }
    if config.n_answers < 2 {
        return Err(Error::Config(format!(
            "answer vocabulary of {} cannot host distractors",
            config.n_answers
        )));
    }
    if config.n_classes == 0 || config.n_classes > config.n_answers {
        return Err(Error::Config(format!(
            "n_classes {} must be in [1, n_answers]",
            config.n_classes
        )));
    }
    if !(0.0..=1.0).contains(&config.corruption_rate) {
        return Err(Error::Config(format!(
            "corruption_rate {} outside [0, 1]",
            config.corruption_rate
        )));
    }
    let (subjects, relations, answers) = layout(&config);
    let mut rng = crate::rng::rng_from(&[config.seed, 0x3d]);

    let subject_class: Vec<usize> = (0..config.n_subjects)
        .map(|_| rng.random_range(0..config.n_classes))
        .collect();
    let mut gold = BTreeMap::new();
    for &r in &relations {
        let table: Vec<u32> = answers.choose_multiple(&mut rng, config.n_classes).copied().collect();
        for (si, &s) in subjects.iter().enumerate() {
            gold.insert((s, r), table[subject_class[si]]);
        }
    }

    let mut pairs: Vec<(u32, u32)> = gold.keys().copied().collect();
    pairs.shuffle(&mut rng);
    let n_corrupt = (config.corruption_rate * pairs.len() as f64).round() as usize;
    let shift = rng.random_range(1..config.n_answers);
    let ans0 = answers[0];
    let mut corruption = BTreeMap::new();
    for &p in &pairs[..n_corrupt] {
        let g = gold[&p];
        if config.systematic_distractors {
            let idx = (g - ans0) as usize;
            corruption.insert(p, ans0 + ((idx + shift) % config.n_answers) as u32);
            continue;
        }
        let d = loop {
            let a = *answers.choose(&mut rng).expect("non-empty answers");
            if a != g {
                break a;
            }
        };
        corruption.insert(p, d);
    }
    Ok(FactWorld {
        config,
        subjects,
        relations,
        answers,
        subject_class,
        gold,
        corruption,
    })
}

/// One training sequence per pair: `subject relation -> label EOS`.
pub fn emit_corpus(world: &FactWorld) -> Vec<Vec<u32>> {
    world
        .pairs()
        .map(|(s, r)| {
            let mut seq = FactWorld::prompt(s, r);
            seq.push(world.label(s, r));
            seq.push(EOS);
            seq
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BadCase {
    pub id: usize,
    pub subject: u32,
    pub relation: u32,
    pub prompt: Vec<u32>,
    pub gold: u32,
    /// What the unperturbed model actually answered.
    pub distractor: u32,
    /// Sorted answer tokens; contains both gold and distractor.
    pub options: Vec<u32>,
}

pub fn answer_of(w: &Weights, prompt: &[u32]) -> Result<u32> {
    let out = generate_greedy(w, prompt, 1, None, None)?;
    Ok(out[prompt.len()])
}

/// Mines every prompt whose greedy answer differs from gold.
pub fn make_bad_cases(w: &Weights, world: &FactWorld, n_options: usize) -> Result<Vec<BadCase>> {
    if n_options < 2 {
        return Err(Error::Config("need at least 2 options".into()));
    }
    let mut cases = Vec::new();
    for (i, (s, r)) in world.pairs().enumerate() {
        let prompt = FactWorld::prompt(s, r);
        let produced = answer_of(w, &prompt)?;
        let gold = world.gold[&(s, r)];
        if produced == gold {
            continue;
        }
        let mut rng = crate::rng::rng_from(&[world.config.seed, i as u64, 0x0b]);
        let mut options = vec![gold, produced];
        let pool: Vec<u32> = world
            .answers
            .iter()
            .copied()
            .filter(|a| *a != gold && *a != produced)
            .collect();
        let extra = n_options.saturating_sub(2).min(pool.len());
        options.extend(pool.choose_multiple(&mut rng, extra));
        options.sort_unstable();
        cases.push(BadCase {
            id: i,
            subject: s,
            relation: r,
            prompt,
            gold,
            distractor: produced,
            options,
        });
    }
    Ok(cases)
}

/// Prompts the model answers with the gold token.
pub fn correct_prompts(w: &Weights, world: &FactWorld) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::new();
    for (s, r) in world.pairs() {
        let prompt = FactWorld::prompt(s, r);
        if answer_of(w, &prompt)? == world.gold[&(s, r)] {
            out.push(prompt);
        }
    }
    Ok(out)
}

pub fn split_cases(cases: &[BadCase], train_fraction: f64, seed: u64) -> Result<(Vec<BadCase>, Vec<BadCase>)> {
    if cases.len() < 2 {
        return Err(Error::input(format!("cannot split {} cases", cases.len())));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::input(format!("train_fraction {train_fraction} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..cases.len()).collect();
    idx.shuffle(&mut crate::rng::rng_from(&[seed, 0x5b]));
    let n_train = ((train_fraction * cases.len() as f64).round() as usize).clamp(1, cases.len() - 1);
    let train = idx[..n_train].iter().map(|&i| cases[i].clone()).collect();
    let held = idx[n_train..].iter().map(|&i| cases[i].clone()).collect();
    Ok((train, held))
}

pub fn save_cases(path: &Path, cases: &[BadCase]) -> Result<()> {
    records::write_records(path, "bad-cases", cases)
}

pub fn load_cases(path: &Path) -> Result<Vec<BadCase>> {
    records::read_records(path, "bad-cases")
}
