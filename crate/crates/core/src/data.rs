//! Synthetic language, pre-training corpus and rule-labeled downstream tasks.
//!
//! The language is a topic grammar over a fixed vocabulary. Each sentence is
//!
//! ```text
//! DET [ADJ] NOUN VERB DET [ADJ] NOUN [PREP DET [ADJ] NOUN] "."
//! ```
//!
//! with every content word drawn from one topic. A hidden "world" fixed by
//! the grammar seed decides, per verb, which nouns may be its subject and
//! which its object, and, per noun, which adjectives may modify it. A
//! sentence is grammatical iff it parses with this template, all of its
//! content words share a topic and every subject/object/adjective choice is
//! allowed. [`Grammar::is_grammatical`] implements that rule, so the Bayes
//! accuracy of the grammaticality task is 1.
//!
//! Token layout: `0..4` are PAD, CLS, SEP, MASK; then determiners,
//! prepositions and the full stop; then each topic's nouns, verbs and
//! adjectives in consecutive blocks. Ids past the last content word are
//! valid but never generated.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::rng::RngState;

pub const PAD: TokenId = 0;
pub const CLS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const MASK: TokenId = 3;
pub const NUM_SPECIAL: usize = 4;

const NUM_DETERMINERS: usize = 4;
const NUM_PREPOSITIONS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarConfig {
    pub topics: usize,
    pub nouns_per_topic: usize,
    pub verbs_per_topic: usize,
    pub adjectives_per_topic: usize,
    /// Fraction of same-topic candidates each relation allows.
    pub allowed_fraction: f64,
    pub adjective_prob: f64,
    pub pp_prob: f64,
    /// Pre-training sequences hold 1..=max_sentences sentences.
    pub max_sentences: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            topics: 6,
            nouns_per_topic: 16,
            verbs_per_topic: 10,
            adjectives_per_topic: 8,
            allowed_fraction: 0.5,
            adjective_prob: 0.5,
            pp_prob: 0.4,
            max_sentences: 2,
        }
    }
}

impl GrammarConfig {
    fn words_per_topic(&self) -> usize {
        self.nouns_per_topic + self.verbs_per_topic + self.adjectives_per_topic
    }

    /// Smallest vocabulary that holds every generated token.
    pub fn required_vocab(&self) -> usize {
        NUM_SPECIAL + NUM_DETERMINERS + NUM_PREPOSITIONS + 1 + self.topics * self.words_per_topic()
    }

    pub fn validate(&self) -> Result<()> {
        if self.topics == 0 || self.nouns_per_topic < 2 || self.verbs_per_topic == 0 || self.adjectives_per_topic < 2 {
            return Err(Error::Config("grammar needs >= 1 topic, >= 2 nouns, >= 1 verb and >= 2 adjectives per topic".into()));
        }
        if !(self.allowed_fraction > 0.0 && self.allowed_fraction < 1.0) {
            return Err(Error::Config("grammar.allowed_fraction must be in (0, 1)".into()));
        }
        if self.max_sentences == 0 {
            return Err(Error::Config("grammar.max_sentences must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordClass {
    Special,
    Determiner,
    Preposition,
    Stop,
    Noun { topic: usize, index: usize },
    Verb { topic: usize, index: usize },
    Adjective { topic: usize, index: usize },
    Unused,
}

impl WordClass {
    /// Topic of a content word.
    pub fn topic(self) -> Option<usize> {
        match self {
            WordClass::Noun { topic, .. } | WordClass::Verb { topic, .. } | WordClass::Adjective { topic, .. } => Some(topic),
            _ => None,
        }
    }
}

/// The generator grammar together with its hidden relation tables.
#[derive(Debug, Clone)]
pub struct Grammar {
    cfg: GrammarConfig,
    /// `[topic][verb][noun]`
    verb_subject: Vec<Vec<Vec<bool>>>,
    verb_object: Vec<Vec<Vec<bool>>>,
    /// `[topic][noun][adjective]`
    noun_adjective: Vec<Vec<Vec<bool>>>,
}

/// A relation row allowing exactly `round(frac * n)` (at least 1, at most n - 1) entries.
fn relation_row(n: usize, frac: f64, rng: &mut RngState) -> Vec<bool> {
    let k = ((n as f64 * frac).round() as usize).clamp(1, n - 1);
    let mut row = vec![false; n];
    for i in rng.sample_indices(n, k) {
        row[i] = true;
    }
    row
}

impl Grammar {
    pub fn new(cfg: GrammarConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let mut table = |outer: usize, inner: usize| -> Vec<Vec<Vec<bool>>> {
            (0..cfg.topics).map(|_| (0..outer).map(|_| relation_row(inner, cfg.allowed_fraction, rng)).collect()).collect()
        };
        let verb_subject = table(cfg.verbs_per_topic, cfg.nouns_per_topic);
        let verb_object = table(cfg.verbs_per_topic, cfg.nouns_per_topic);
        let noun_adjective = table(cfg.nouns_per_topic, cfg.adjectives_per_topic);
        Ok(Self { cfg, verb_subject, verb_object, noun_adjective })
    }

    pub fn config(&self) -> &GrammarConfig {
        &self.cfg
    }

    pub fn vocab_needed(&self) -> usize {
        self.cfg.required_vocab()
    }

    fn content_base(&self) -> usize {
        NUM_SPECIAL + NUM_DETERMINERS + NUM_PREPOSITIONS + 1
    }

    fn stop(&self) -> TokenId {
        (NUM_SPECIAL + NUM_DETERMINERS + NUM_PREPOSITIONS) as TokenId
    }

    pub fn noun(&self, topic: usize, i: usize) -> TokenId {
        (self.content_base() + topic * self.cfg.words_per_topic() + i) as TokenId
    }

    pub fn verb(&self, topic: usize, i: usize) -> TokenId {
        (self.content_base() + topic * self.cfg.words_per_topic() + self.cfg.nouns_per_topic + i) as TokenId
    }

    pub fn adjective(&self, topic: usize, i: usize) -> TokenId {
        (self.content_base() + topic * self.cfg.words_per_topic() + self.cfg.nouns_per_topic + self.cfg.verbs_per_topic + i) as TokenId
    }

    pub fn classify(&self, tok: TokenId) -> WordClass {
        let t = tok as usize;
        if t < NUM_SPECIAL {
            return WordClass::Special;
        }
        if t < NUM_SPECIAL + NUM_DETERMINERS {
            return WordClass::Determiner;
        }
        if t < NUM_SPECIAL + NUM_DETERMINERS + NUM_PREPOSITIONS {
            return WordClass::Preposition;
        }
        if tok == self.stop() {
            return WordClass::Stop;
        }
        let off = t - self.content_base();
        let wpt = self.cfg.words_per_topic();
        let topic = off / wpt;
        if topic >= self.cfg.topics {
            return WordClass::Unused;
        }
        let i = off % wpt;
        let (n, v) = (self.cfg.nouns_per_topic, self.cfg.verbs_per_topic);
        if i < n {
            WordClass::Noun { topic, index: i }
        } else if i < n + v {
            WordClass::Verb { topic, index: i - n }
        } else {
            WordClass::Adjective { topic, index: i - n - v }
        }
    }

    /// Ids that may stand in as random replacement tokens during MLM masking.
    pub fn word_range(&self) -> std::ops::Range<TokenId> {
        NUM_SPECIAL as TokenId..self.vocab_needed() as TokenId
    }

    fn pick(&self, row: &[bool], rng: &mut RngState) -> usize {
        let allowed: Vec<usize> = row.iter().enumerate().filter(|(_, a)| **a).map(|(i, _)| i).collect();
        allowed[rng.below(allowed.len())]
    }

    fn push_noun_phrase(&self, out: &mut Vec<TokenId>, topic: usize, noun: usize, rng: &mut RngState) {
        out.push((NUM_SPECIAL + rng.below(NUM_DETERMINERS)) as TokenId);
        if f64::from(rng.uniform()) < self.cfg.adjective_prob {
            let a = self.pick(&self.noun_adjective[topic][noun], rng);
            out.push(self.adjective(topic, a));
        }
        out.push(self.noun(topic, noun));
    }

    /// One grammatical sentence about `topic`, ending in the full stop.
    pub fn sentence(&self, topic: usize, rng: &mut RngState) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(12);
        let verb = rng.below(self.cfg.verbs_per_topic);
        let subj = self.pick(&self.verb_subject[topic][verb], rng);
        let obj = self.pick(&self.verb_object[topic][verb], rng);
        self.push_noun_phrase(&mut out, topic, subj, rng);
        out.push(self.verb(topic, verb));
        self.push_noun_phrase(&mut out, topic, obj, rng);
        if f64::from(rng.uniform()) < self.cfg.pp_prob {
            out.push((NUM_SPECIAL + NUM_DETERMINERS + rng.below(NUM_PREPOSITIONS)) as TokenId);
            let n = rng.below(self.cfg.nouns_per_topic);
            self.push_noun_phrase(&mut out, topic, n, rng);
        }
        out.push(self.stop());
        out
    }

    pub fn random_topic(&self, rng: &mut RngState) -> usize {
        rng.below(self.cfg.topics)
    }

    /// A pre-training sequence: CLS followed by 1..=max_sentences sentences, each on its own topic.
    pub fn pretrain_sequence(&self, rng: &mut RngState) -> Vec<TokenId> {
        let n = 1 + rng.below(self.cfg.max_sentences);
        let mut out = vec![CLS];
        for _ in 0..n {
            let t = self.random_topic(rng);
            out.extend(self.sentence(t, rng));
        }
        out
    }

    /// Parses one sentence (without CLS) and checks every grammar constraint.
    pub fn sentence_is_grammatical(&self, s: &[TokenId]) -> bool {
        self.parse_sentence(s).is_some()
    }

    /// Returns the sentence topic when the sentence is grammatical.
    pub fn parse_sentence(&self, s: &[TokenId]) -> Option<usize> {
        let mut pos = 0;
        let np = |pos: &mut usize| -> Option<(usize, usize, Option<usize>)> {
            if !matches!(self.classify(*s.get(*pos)?), WordClass::Determiner) {
                return None;
            }
            *pos += 1;
            let mut adj = None;
            let mut adj_topic = None;
            if let WordClass::Adjective { topic, index } = self.classify(*s.get(*pos)?) {
                adj = Some(index);
                adj_topic = Some(topic);
                *pos += 1;
            }
            match self.classify(*s.get(*pos)?) {
                WordClass::Noun { topic, index } => {
                    *pos += 1;
                    if adj_topic.is_some_and(|t| t != topic) {
                        return None;
                    }
                    Some((topic, index, adj))
                }
                _ => None,
            }
        };
        let (t_subj, subj, subj_adj) = np(&mut pos)?;
        let WordClass::Verb { topic: t_verb, index: verb } = self.classify(*s.get(pos)?) else { return None };
        pos += 1;
        let (t_obj, obj, obj_adj) = np(&mut pos)?;
        let mut nouns = vec![(t_subj, subj, subj_adj), (t_obj, obj, obj_adj)];
        if matches!(self.classify(*s.get(pos)?), WordClass::Preposition) {
            pos += 1;
            nouns.push(np(&mut pos)?);
        }
        if *s.get(pos)? != self.stop() || pos + 1 != s.len() {
            return None;
        }
        let topic = t_verb;
        if nouns.iter().any(|(t, _, _)| *t != topic) {
            return None;
        }
        if !self.verb_subject[topic][verb][subj] || !self.verb_object[topic][verb][obj] {
            return None;
        }
        for (_, n, a) in &nouns {
            if let Some(a) = a {
                if !self.noun_adjective[topic][*n][*a] {
                    return None;
                }
            }
        }
        Some(topic)
    }

    /// Splits a `CLS s1 [SEP] s2 ...` sequence into sentences and checks each.
    pub fn is_grammatical(&self, seq: &[TokenId]) -> bool {
        let Some((&CLS, rest)) = seq.split_first() else { return false };
        let body: Vec<TokenId> = rest.iter().copied().filter(|&t| t != SEP).collect();
        if body.is_empty() {
            return false;
        }
        let stop = self.stop();
        let mut start = 0;
        for (i, &t) in body.iter().enumerate() {
            if t == stop {
                if !self.sentence_is_grammatical(&body[start..=i]) {
                    return false;
                }
                start = i + 1;
            }
        }
        start == body.len()
    }

    /// Replaces one content word of a grammatical sentence. Half the time the
    /// replacement comes from another topic; otherwise it is a same-topic word
    /// that violates a relation, so only the relation tables reveal the error.
    pub fn corrupt(&self, sentence: &[TokenId], rng: &mut RngState) -> Vec<TokenId> {
        if self.cfg.topics > 1 && rng.below(2) == 0 {
            let mut s = sentence.to_vec();
            let slots: Vec<usize> = (0..s.len()).filter(|&i| self.classify(s[i]).topic().is_some()).collect();
            let i = slots[rng.below(slots.len())];
            let topic = self.classify(s[i]).topic().expect("content word");
            let other = (topic + 1 + rng.below(self.cfg.topics - 1)) % self.cfg.topics;
            s[i] = match self.classify(s[i]) {
                WordClass::Noun { .. } => self.noun(other, rng.below(self.cfg.nouns_per_topic)),
                WordClass::Verb { .. } => self.verb(other, rng.below(self.cfg.verbs_per_topic)),
                _ => self.adjective(other, rng.below(self.cfg.adjectives_per_topic)),
            };
            return s;
        }
        loop {
            let mut s = sentence.to_vec();
            let slots: Vec<usize> = (0..s.len())
                .filter(|&i| matches!(self.classify(s[i]), WordClass::Noun { .. } | WordClass::Adjective { .. }))
                .collect();
            let i = slots[rng.below(slots.len())];
            let cands: Vec<TokenId> = match self.classify(s[i]) {
                WordClass::Noun { topic, .. } => (0..self.cfg.nouns_per_topic).map(|n| self.noun(topic, n)).collect(),
                WordClass::Adjective { topic, .. } => (0..self.cfg.adjectives_per_topic).map(|a| self.adjective(topic, a)).collect(),
                _ => unreachable!(),
            };
            let bad: Vec<TokenId> = cands
                .into_iter()
                .filter(|&c| {
                    s[i] = c;
                    !self.sentence_is_grammatical(&s)
                })
                .collect();
            if !bad.is_empty() {
                s[i] = bad[rng.below(bad.len())];
                return s;
            }
        }
    }
}

/// Held-out split of generated pre-training sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Vec<TokenId>>,
    pub dev: Vec<Vec<TokenId>>,
}

impl Corpus {
    /// Generates `train_size` training and `dev_size` dev sequences. Dev
    /// sequences that also occur in train are redrawn, so the splits are disjoint.
    pub fn generate(grammar: &Grammar, train_size: usize, dev_size: usize, rng: &mut RngState) -> Result<Self> {
        if train_size == 0 || dev_size == 0 {
            return Err(Error::InvalidParameter("corpus sizes must be positive".into()));
        }
        let mut r = rng.split_named("corpus/train");
        let train: Vec<Vec<TokenId>> = (0..train_size).map(|_| grammar.pretrain_sequence(&mut r)).collect();
        let seen: HashSet<&Vec<TokenId>> = train.iter().collect();
        let mut r = rng.split_named("corpus/dev");
        let mut dev = Vec::with_capacity(dev_size);
        while dev.len() < dev_size {
            let s = grammar.pretrain_sequence(&mut r);
            if !seen.contains(&s) {
                dev.push(s);
            }
        }
        Ok(Self { train, dev })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_sequences(&dir.join("corpus.train.txt"), &self.train)?;
        write_sequences(&dir.join("corpus.dev.txt"), &self.dev)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Self { train: read_sequences(&dir.join("corpus.train.txt"))?, dev: read_sequences(&dir.join("corpus.dev.txt"))? })
    }
}

fn write_sequences(path: &Path, seqs: &[Vec<TokenId>]) -> Result<()> {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&s.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn parse_ids(line: &str, path: &Path, lineno: usize) -> Result<Vec<TokenId>> {
    line.split_whitespace()
        .map(|w| w.parse::<TokenId>().map_err(|e| Error::Corrupt(format!("{}:{}: `{w}`: {e}", path.display(), lineno + 1))))
        .collect()
}

fn read_sequences(path: &Path) -> Result<Vec<Vec<TokenId>>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(parse_ids(&line, path, i)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Single sentence; label 1 iff grammatical. Negatives swap in one off-topic or relation-violating word.
    Grammaticality,
    /// Two sentences separated by SEP; label 1 iff both share a topic.
    TopicMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSize {
    Large,
    Small,
}

impl TaskSize {
    pub fn train_examples(self) -> usize {
        match self {
            TaskSize::Large => 20_000,
            TaskSize::Small => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub size: TaskSize,
    /// Overrides the preset size when set.
    #[serde(default)]
    pub train_examples: Option<usize>,
    #[serde(default = "default_dev_examples")]
    pub dev_examples: usize,
}

fn default_dev_examples() -> usize {
    1000
}

impl TaskSpec {
    pub fn train_size(&self) -> usize {
        self.train_examples.unwrap_or_else(|| self.size.train_examples())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamTask {
    pub name: String,
    pub kind: TaskKind,
    pub num_classes: usize,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

impl DownstreamTask {
    pub fn generate(grammar: &Grammar, spec: &TaskSpec, rng: &RngState) -> Result<Self> {
        if spec.train_size() == 0 || spec.dev_examples == 0 {
            return Err(Error::InvalidParameter(format!("task `{}` needs positive train and dev sizes", spec.name)));
        }
        let mut r = rng.split_named(&format!("task/{}", spec.name));
        let mut seen = HashSet::new();
        let mut make = |n: usize, seen: &mut HashSet<Vec<TokenId>>, exclusive: bool| -> Vec<Example> {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let ex = Self::example(grammar, spec.kind, out.len() % 2, &mut r);
                if exclusive && seen.contains(&ex.tokens) {
                    continue;
                }
                seen.insert(ex.tokens.clone());
                out.push(ex);
            }
            out
        };
        let mut train = make(spec.train_size(), &mut seen, false);
        let dev = make(spec.dev_examples, &mut seen, true);
        r.shuffle(&mut train);
        Ok(Self { name: spec.name.clone(), kind: spec.kind, num_classes: 2, train, dev })
    }

    fn example(g: &Grammar, kind: TaskKind, label: usize, rng: &mut RngState) -> Example {
        match kind {
            TaskKind::Grammaticality => {
                let t = g.random_topic(rng);
                let s = g.sentence(t, rng);
                let s = if label == 1 { s } else { g.corrupt(&s, rng) };
                let mut tokens = vec![CLS];
                tokens.extend(s);
                Example { tokens, label }
            }
            TaskKind::TopicMatch => {
                let t1 = g.random_topic(rng);
                let t2 = if label == 1 {
                    t1
                } else {
                    let o = rng.below(g.config().topics - 1);
                    if o >= t1 {
                        o + 1
                    } else {
                        o
                    }
                };
                let mut tokens = vec![CLS];
                tokens.extend(g.sentence(t1, rng));
                tokens.push(SEP);
                tokens.extend(g.sentence(t2, rng));
                Example { tokens, label }
            }
        }
    }

    /// The documented labeling rule, applied to a bare sequence.
    pub fn rule_label(grammar: &Grammar, kind: TaskKind, tokens: &[TokenId]) -> Option<usize> {
        match kind {
            TaskKind::Grammaticality => Some(usize::from(grammar.is_grammatical(tokens))),
            TaskKind::TopicMatch => {
                let sep = tokens.iter().position(|&t| t == SEP)?;
                let a = grammar.parse_sentence(&tokens[1..sep])?;
                let b = grammar.parse_sentence(&tokens[sep + 1..])?;
                Some(usize::from(a == b))
            }
        }
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (split, exs) in [("train", &self.train), ("dev", &self.dev)] {
            let mut out = String::new();
            for e in exs {
                out.push_str(&e.label.to_string());
                out.push('\t');
                out.push_str(&e.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "));
                out.push('\n');
            }
            write_file(&dir.join(format!("task.{}.{split}.tsv", self.name)), out.as_bytes())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grammar() -> Grammar {
        Grammar::new(GrammarConfig::default(), &mut RngState::new(1)).unwrap()
    }

    #[test]
    fn vocabulary_fits_default_model() {
        assert!(GrammarConfig::default().required_vocab() <= 256);
    }

    #[test]
    fn generated_sentences_are_grammatical() {
        let g = grammar();
        let mut r = RngState::new(2);
        for _ in 0..2000 {
            let s = g.pretrain_sequence(&mut r);
            assert!(g.is_grammatical(&s), "{s:?}");
            assert!(s.iter().all(|&t| (t as usize) < g.vocab_needed()));
        }
    }

    #[test]
    fn corruptions_are_single_substitutions() {
        let g = grammar();
        let mut r = RngState::new(3);
        for _ in 0..2000 {
            let t = g.random_topic(&mut r);
            let s = g.sentence(t, &mut r);
            let c = g.corrupt(&s, &mut r);
            assert!(!g.sentence_is_grammatical(&c));
            assert_eq!(s.len(), c.len());
            assert_eq!(s.iter().zip(&c).filter(|(a, b)| a != b).count(), 1);
        }
    }

    #[test]
    fn task_labels_follow_the_rule() {
        let g = grammar();
        for kind in [TaskKind::Grammaticality, TaskKind::TopicMatch] {
            let spec = TaskSpec { name: "t".into(), kind, size: TaskSize::Small, train_examples: Some(300), dev_examples: 200 };
            let task = DownstreamTask::generate(&g, &spec, &RngState::new(4)).unwrap();
            for e in task.train.iter().chain(&task.dev) {
                assert_eq!(DownstreamTask::rule_label(&g, kind, &e.tokens), Some(e.label));
            }
            let pos = task.dev.iter().filter(|e| e.label == 1).count();
            assert_eq!(pos, 100);
            let train: HashSet<_> = task.train.iter().map(|e| &e.tokens).collect();
            assert!(task.dev.iter().all(|e| !train.contains(&e.tokens)));
        }
    }

    #[test]
    fn corpus_is_regenerable_and_disjoint() {
        let g = grammar();
        let a = Corpus::generate(&g, 500, 100, &mut RngState::new(5)).unwrap();
        let b = Corpus::generate(&g, 500, 100, &mut RngState::new(5)).unwrap();
        assert_eq!(a, b);
        let train: HashSet<_> = a.train.iter().collect();
        assert!(a.dev.iter().all(|s| !train.contains(s)));
        assert!(Corpus::generate(&g, 0, 10, &mut RngState::new(5)).is_err());
    }

    #[test]
    fn preset_sizes_keep_their_ratio() {
        assert!(TaskSize::Large.train_examples() >= 20 * TaskSize::Small.train_examples());
    }
}
