//! Synthetic multi-task translation corpora.
//!
//! "Languages" are symbol strings over a shared content alphabet. Source
//! sentences come from a sparse bigram chain so a language model has
//! something to learn; translation is a fixed substitution cipher. The five
//! task families mirror general, document, domain, terminology and
//! post-editing translation, each with an exact oracle.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const TAG_GENERAL: usize = 4;
pub const TAG_DOC: usize = 5;
pub const TAG_DOMAIN: usize = 6;
pub const TAG_TERM: usize = 7;
pub const TAG_POSTEDIT: usize = 8;
pub const TAG_FWD: usize = 9;
pub const TAG_BWD: usize = 10;
pub const TAG_COPY: usize = 11;
/// Domain tags `<d0>..<d2>` occupy 12..15.
pub const TAG_DOMAIN0: usize = 12;
pub const NUM_DOMAINS: usize = 3;
pub const FIRST_CONTENT: usize = 16;
pub const MAX_CONTENT: usize = 512;

const RESERVED: [&str; FIRST_CONTENT] = [
    "<pad>", "<s>", "</s>", "<sep>", "<gen>", "<doc>", "<dom>", "<term>", "<pe>", "<fwd>", "<bwd>", "<copy>", "<d0>",
    "<d1>", "<d2>", "<r15>",
];

/// Bijective symbol table. Ids 0..16 are reserved, content symbols
/// `w0, w1, ...` follow.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved symbols plus `w0..w511`.
    pub fn standard() -> Self {
        Self::with_content(MAX_CONTENT)
    }

    pub fn with_content(n: usize) -> Self {
        let symbols: Vec<String> =
            RESERVED.iter().map(|s| s.to_string()).chain((0..n).map(|i| format!("w{i}"))).collect();
        Self::from_symbols(symbols).expect("standard vocabulary is bijective")
    }

    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Data { line: i + 1, msg: format!("invalid symbol {s:?}") });
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Data { line: i + 1, msg: format!("duplicate symbol {s:?}") });
            }
        }
        Ok(Vocab { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.index.get(symbol).copied().ok_or_else(|| Error::Vocab(format!("unknown symbol {symbol:?}")))
    }

    pub fn symbol(&self, id: usize) -> Result<&str> {
        self.symbols
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocab(format!("id {id} outside vocabulary of {}", self.len())))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|s| self.id(s)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let parts: Result<Vec<&str>> = ids.iter().map(|&i| self.symbol(i)).collect();
        Ok(parts?.join(" "))
    }

    /// One symbol per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for s in &self.symbols {
            writeln!(w, "{s}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let symbols = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_symbols(symbols)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    General,
    Doc,
    Domain,
    Terminology,
    Postedit,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::General, Task::Doc, Task::Domain, Task::Terminology, Task::Postedit];

    pub fn name(self) -> &'static str {
        match self {
            Task::General => "general",
            Task::Doc => "doc",
            Task::Domain => "domain",
            Task::Terminology => "terminology",
            Task::Postedit => "postedit",
        }
    }

    pub fn tag(self) -> usize {
        match self {
            Task::General => TAG_GENERAL,
            Task::Doc => TAG_DOC,
            Task::Domain => TAG_DOMAIN,
            Task::Terminology => TAG_TERM,
            Task::Postedit => TAG_POSTEDIT,
        }
    }

    fn from_tag(tag: usize) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.tag() == tag)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| Error::arg(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Fwd,
    Bwd,
    Copy,
}

impl Direction {
    pub fn tag(self) -> usize {
        match self {
            Direction::Fwd => TAG_FWD,
            Direction::Bwd => TAG_BWD,
            Direction::Copy => TAG_COPY,
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fwd" => Ok(Direction::Fwd),
            "bwd" => Ok(Direction::Bwd),
            "copy" => Ok(Direction::Copy),
            _ => Err(Error::arg(format!("unknown direction {s:?}"))),
        }
    }
}

/// Which substitution table maps a content symbol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Table {
    Identity,
    Sigma,
    SigmaInv,
    Domain(usize),
}

/// Fixed cipher tables and source-language statistics. The world is a
/// function of `(content, seed)` only, so every corpus drawn from it shares
/// one "language pair".
#[derive(Clone, Debug)]
pub struct World {
    pub content: usize,
    sigma: Vec<usize>,
    sigma_inv: Vec<usize>,
    /// Successor of each content index in one cycle through all of them.
    tau: Vec<usize>,
    successors: Vec<Vec<usize>>,
}

impl World {
    pub const DEFAULT_SEED: u64 = 0x4c61_4d61_5445;
    pub const BRANCHING: usize = 8;

    pub fn new(content: usize, seed: u64) -> Result<Self> {
        if !(2..=MAX_CONTENT).contains(&content) {
            return Err(Error::arg(format!("content alphabet {content} outside 2..={MAX_CONTENT}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sigma: Vec<usize> = (0..content).collect();
        sigma.shuffle(&mut rng);
        let mut sigma_inv = vec![0; content];
        for (i, &s) in sigma.iter().enumerate() {
            sigma_inv[s] = i;
        }
        let mut order: Vec<usize> = (0..content).collect();
        order.shuffle(&mut rng);
        let mut tau = vec![0; content];
        for m in 0..content {
            tau[order[m]] = order[(m + 1) % content];
        }
        let branching = Self::BRANCHING.min(content);
        let successors = (0..content)
            .map(|_| {
                let mut all: Vec<usize> = (0..content).collect();
                all.shuffle(&mut rng);
                all.truncate(branching);
                all
            })
            .collect();
        Ok(World { content, sigma, sigma_inv, tau, successors })
    }

    pub fn standard() -> Self {
        Self::new(MAX_CONTENT, Self::DEFAULT_SEED).expect("standard world")
    }

    pub fn is_content(&self, id: usize) -> bool {
        (FIRST_CONTENT..FIRST_CONTENT + self.content).contains(&id)
    }

    /// Maps a token through `table`; non-content tokens pass unchanged.
    pub fn map(&self, table: Table, id: usize) -> usize {
        if !self.is_content(id) {
            return id;
        }
        let i = id - FIRST_CONTENT;
        let j = match table {
            Table::Identity => i,
            Table::Sigma => self.sigma[i],
            Table::SigmaInv => self.sigma_inv[i],
            Table::Domain(d) => {
                let mut k = i;
                for _ in 0..=d {
                    k = self.tau[k];
                }
                self.sigma[k]
            }
        };
        FIRST_CONTENT + j
    }

    pub fn map_seq(&self, table: Table, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&t| self.map(table, t)).collect()
    }

    /// A bigram-chain sentence of `len` content tokens.
    pub fn sentence<R: Rng>(&self, rng: &mut R, len: usize) -> Vec<usize> {
        let mut cur = rng.random_range(0..self.content);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(FIRST_CONTENT + cur);
            let succ = &self.successors[cur];
            cur = succ[rng.random_range(0..succ.len())];
        }
        out
    }

    /// Probability of `next` following `prev` under the source chain
    /// (uniform over the successor list).
    pub fn transition_prob(&self, prev: usize, next: usize) -> f64 {
        let (p, n) = (prev - FIRST_CONTENT, next - FIRST_CONTENT);
        let succ = &self.successors[p];
        succ.iter().filter(|&&s| s == n).count() as f64 / succ.len() as f64
    }
}

/// Length and difficulty knobs of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub min_len: usize,
    pub max_len: usize,
    pub min_sents: usize,
    pub max_sents: usize,
    /// Size of the content alphabet actually used (≤ 512).
    pub content: usize,
    /// Directions drawn for the general task.
    pub directions: Vec<Direction>,
    pub max_terms: usize,
    pub max_corruptions: usize,
    pub world_seed: u64,
}

impl Default for Profile {
    fn default() -> Self {
        Profile {
            min_len: 4,
            max_len: 16,
            min_sents: 2,
            max_sents: 6,
            content: MAX_CONTENT,
            directions: vec![Direction::Fwd, Direction::Bwd],
            max_terms: 2,
            max_corruptions: 3,
            world_seed: World::DEFAULT_SEED,
        }
    }
}

impl Profile {
    pub fn world(&self) -> Result<World> {
        World::new(self.content, self.world_seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::arg(format!("sentence lengths {}..={}", self.min_len, self.max_len)));
        }
        if self.min_sents == 0 || self.min_sents > self.max_sents {
            return Err(Error::arg(format!("document sizes {}..={}", self.min_sents, self.max_sents)));
        }
        if self.directions.is_empty() {
            return Err(Error::arg("no translation directions"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Meta {
    /// Terminology constraints: source term, required target term.
    pub terms: Vec<(Vec<usize>, Vec<usize>)>,
    pub draft: Option<Vec<usize>>,
    pub corruptions: Option<usize>,
}

/// One corpus record, token ids throughout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub task: Task,
    pub prompt: Vec<usize>,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub meta: Meta,
}

fn cipher_for(dir: Direction) -> Table {
    match dir {
        Direction::Fwd => Table::Sigma,
        Direction::Bwd => Table::SigmaInv,
        Direction::Copy => Table::Identity,
    }
}

/// Recomputes the reference output from the prompt and source alone.
pub fn oracle(world: &World, prompt: &[usize], source: &[usize]) -> Result<Vec<usize>> {
    let bad = |m: &str| Error::arg(format!("malformed prompt: {m}"));
    let task = prompt.first().and_then(|&t| Task::from_tag(t)).ok_or_else(|| bad("missing task tag"))?;
    let sel = *prompt.get(1).ok_or_else(|| bad("missing direction/domain tag"))?;
    let table = if task == Task::Domain {
        if !(TAG_DOMAIN0..TAG_DOMAIN0 + NUM_DOMAINS).contains(&sel) {
            return Err(bad("domain tag expected"));
        }
        Table::Domain(sel - TAG_DOMAIN0)
    } else {
        match sel {
            TAG_FWD => Table::Sigma,
            TAG_BWD => Table::SigmaInv,
            TAG_COPY => Table::Identity,
            _ => return Err(bad("direction tag expected")),
        }
    };
    match task {
        Task::General | Task::Doc | Task::Domain => Ok(world.map_seq(table, source)),
        Task::Terminology => {
            let mut overrides = HashMap::new();
            for pair in prompt[2..].split(|&t| t == SEP).filter(|p| !p.is_empty()) {
                if pair.len() != 2 {
                    return Err(bad("terminology pairs must be `src tgt <sep>`"));
                }
                overrides.insert(pair[0], pair[1]);
            }
            Ok(source.iter().map(|t| overrides.get(t).copied().unwrap_or_else(|| world.map(table, *t))).collect())
        }
        Task::Postedit => {
            let cut = source.iter().position(|&t| t == SEP).ok_or_else(|| bad("post-edit source lacks <sep>"))?;
            Ok(world.map_seq(table, &source[cut + 1..]))
        }
    }
}

/// Corpus generator over one world.
pub struct Generator<'w> {
    world: &'w World,
    profile: Profile,
    rng: ChaCha8Rng,
}

impl<'w> Generator<'w> {
    pub fn new(world: &'w World, profile: Profile, seed: u64) -> Result<Self> {
        profile.validate()?;
        if profile.content != world.content {
            return Err(Error::arg("profile and world disagree on the content alphabet"));
        }
        Ok(Generator { world, profile, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    fn len(&mut self) -> usize {
        self.rng.random_range(self.profile.min_len..=self.profile.max_len)
    }

    fn sentence(&mut self) -> Vec<usize> {
        let n = self.len();
        self.world.sentence(&mut self.rng, n)
    }

    /// Source-side text for a direction: the chain sentence itself, or its
    /// cipher image when translating backwards.
    fn source_sentence(&mut self, dir: Direction) -> Vec<usize> {
        let s = self.sentence();
        match dir {
            Direction::Bwd => self.world.map_seq(Table::Sigma, &s),
            _ => s,
        }
    }

    pub fn example(&mut self, task: Task) -> Example {
        match task {
            Task::General => {
                let dirs = &self.profile.directions;
                let dir = dirs[self.rng.random_range(0..dirs.len())];
                let source = self.source_sentence(dir);
                let target = self.world.map_seq(cipher_for(dir), &source);
                Example { task, prompt: vec![TAG_GENERAL, dir.tag()], source, target, meta: Meta::default() }
            }
            Task::Doc => {
                let n = self.rng.random_range(self.profile.min_sents..=self.profile.max_sents);
                let mut source = Vec::new();
                for i in 0..n {
                    if i > 0 {
                        source.push(SEP);
                    }
                    let s = self.sentence();
                    source.extend(s);
                }
                let target = self.world.map_seq(Table::Sigma, &source);
                Example { task, prompt: vec![TAG_DOC, TAG_FWD], source, target, meta: Meta::default() }
            }
            Task::Domain => {
                let d = self.rng.random_range(0..NUM_DOMAINS);
                let source = self.sentence();
                let target = self.world.map_seq(Table::Domain(d), &source);
                Example { task, prompt: vec![TAG_DOMAIN, TAG_DOMAIN0 + d], source, target, meta: Meta::default() }
            }
            Task::Terminology => {
                let source = self.sentence();
                let mut distinct: Vec<usize> = Vec::new();
                for &t in &source {
                    if !distinct.contains(&t) {
                        distinct.push(t);
                    }
                }
                let n_terms = self.rng.random_range(1..=self.profile.max_terms.max(1)).min(distinct.len());
                distinct.shuffle(&mut self.rng);
                let mut prompt = vec![TAG_TERM, TAG_FWD];
                let mut terms = Vec::new();
                for &a in &distinct[..n_terms] {
                    let regular = self.world.map(Table::Sigma, a);
                    let z = loop {
                        let z = FIRST_CONTENT + self.rng.random_range(0..self.world.content);
                        if z != regular {
                            break z;
                        }
                    };
                    prompt.extend([a, z, SEP]);
                    terms.push((vec![a], vec![z]));
                }
                let target = source
                    .iter()
                    .map(|t| {
                        terms
                            .iter()
                            .find(|(a, _)| a[0] == *t)
                            .map(|(_, z)| z[0])
                            .unwrap_or_else(|| self.world.map(Table::Sigma, *t))
                    })
                    .collect();
                Example { task, prompt, source, target, meta: Meta { terms, ..Meta::default() } }
            }
            Task::Postedit => {
                let k = self.rng.random_range(0..=self.profile.max_corruptions);
                self.postedit(k)
            }
        }
    }

    /// Post-edit example whose draft carries exactly `k` substitutions
    /// (capped at the sentence length).
    pub fn postedit(&mut self, k: usize) -> Example {
        let src = self.sentence();
        let target = self.world.map_seq(Table::Sigma, &src);
        let mut draft = target.clone();
        let mut positions: Vec<usize> = (0..draft.len()).collect();
        positions.shuffle(&mut self.rng);
        let k = k.min(draft.len());
        for &p in &positions[..k] {
            draft[p] = loop {
                let z = FIRST_CONTENT + self.rng.random_range(0..self.world.content);
                if z != target[p] {
                    break z;
                }
            };
        }
        let mut source = draft.clone();
        source.push(SEP);
        source.extend(&src);
        Example {
            task: Task::Postedit,
            prompt: vec![TAG_POSTEDIT, TAG_FWD],
            source,
            target,
            meta: Meta { draft: Some(draft), corruptions: Some(k), ..Meta::default() },
        }
    }

    /// Monolingual LM stream: 1–4 sentences of one language, `<sep>`
    /// separated, wrapped in `<s> ... </s>`.
    pub fn lm_stream(&mut self) -> Vec<usize> {
        let target_side = self.rng.random_bool(0.5);
        let n = self.rng.random_range(1..=4);
        let mut out = vec![BOS];
        for i in 0..n {
            if i > 0 {
                out.push(SEP);
            }
            let s = self.sentence();
            out.extend(if target_side { self.world.map_seq(Table::Sigma, &s) } else { s });
        }
        out.push(EOS);
        out
    }
}

/// `n` examples of one task, deterministic in `seed`.
pub fn gen_corpus(task: Task, n: usize, seed: u64, profile: &Profile) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::arg("corpus size must be at least 1"));
    }
    let world = profile.world()?;
    let mut g = Generator::new(&world, profile.clone(), seed)?;
    Ok((0..n).map(|_| g.example(task)).collect())
}

/// `n` examples with tasks drawn by `weights`.
pub fn gen_mixture(weights: &[(Task, f64)], n: usize, seed: u64, profile: &Profile) -> Result<Vec<Example>> {
    if n == 0 || weights.is_empty() || weights.iter().any(|w| w.1 < 0.0) {
        return Err(Error::arg("mixture needs n ≥ 1 and non-negative weights"));
    }
    let total: f64 = weights.iter().map(|w| w.1).sum();
    if total <= 0.0 {
        return Err(Error::arg("mixture weights sum to zero"));
    }
    let world = profile.world()?;
    let mut g = Generator::new(&world, profile.clone(), seed)?;
    let mut pick = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
    Ok((0..n)
        .map(|_| {
            let mut u = pick.random::<f64>() * total;
            let mut task = weights[weights.len() - 1].0;
            for &(t, w) in weights {
                if u < w {
                    task = t;
                    break;
                }
                u -= w;
            }
            g.example(task)
        })
        .collect())
}

/// `n` LM training streams, deterministic in `seed`.
pub fn gen_lm_corpus(n: usize, seed: u64, profile: &Profile) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::arg("corpus size must be at least 1"));
    }
    let world = profile.world()?;
    let mut g = Generator::new(&world, profile.clone(), seed)?;
    Ok((0..n).map(|_| g.lm_stream()).collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    task: String,
    prompt: String,
    source: String,
    target: String,
    #[serde(default)]
    meta: MetaRecord,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaRecord {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    terms: Vec<[String; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    draft: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    corruptions: Option<usize>,
}

impl Example {
    fn to_record(&self, v: &Vocab) -> Result<Record> {
        Ok(Record {
            task: self.task.name().into(),
            prompt: v.detokenize(&self.prompt)?,
            source: v.detokenize(&self.source)?,
            target: v.detokenize(&self.target)?,
            meta: MetaRecord {
                terms: self
                    .meta
                    .terms
                    .iter()
                    .map(|(a, b)| Ok([v.detokenize(a)?, v.detokenize(b)?]))
                    .collect::<Result<_>>()?,
                draft: self.meta.draft.as_ref().map(|d| v.detokenize(d)).transpose()?,
                corruptions: self.meta.corruptions,
            },
        })
    }

    fn from_record(r: Record, v: &Vocab) -> Result<Self> {
        Ok(Example {
            task: r.task.parse()?,
            prompt: v.tokenize(&r.prompt)?,
            source: v.tokenize(&r.source)?,
            target: v.tokenize(&r.target)?,
            meta: Meta {
                terms: r.meta.terms.iter().map(|[a, b]| Ok((v.tokenize(a)?, v.tokenize(b)?))).collect::<Result<_>>()?,
                draft: r.meta.draft.as_deref().map(|d| v.tokenize(d)).transpose()?,
                corruptions: r.meta.corruptions,
            },
        })
    }
}

pub fn write_jsonl(path: &Path, examples: &[Example], vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut w, &e.to_record(vocab)?)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSONL corpus. Blank lines are skipped; CRLF endings accepted.
/// Errors carry the 1-based line number.
pub fn read_jsonl(path: &Path, vocab: &Vocab) -> Result<Vec<Example>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Data { line: i + 1, msg: e.to_string() })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Data { line: i + 1, msg: e.to_string() })?;
        let ex = Example::from_record(rec, vocab).map_err(|e| Error::Data { line: i + 1, msg: e.to_string() })?;
        out.push(ex);
    }
    Ok(out)
}

/// LM streams as plain symbol lines.
pub fn write_streams(path: &Path, streams: &[Vec<usize>], vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in streams {
        writeln!(w, "{}", vocab.detokenize(s)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_streams(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Data { line: i + 1, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(vocab.tokenize(&line).map_err(|e| Error::Data { line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}
