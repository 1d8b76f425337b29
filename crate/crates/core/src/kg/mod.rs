//! Triple files, vocabularies, reverse augmentation and graph indexes.

mod degree;
mod index;
pub mod synthetic;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use crate::error::{GathError, Result};

pub use degree::{bucket_degrees, Bucket, DegreeBuckets};
pub use index::{Edge, NeighborhoodIndex};

/// Suffix naming the synthetic inverse of a raw relation.
pub const REVERSE_SUFFIX: &str = "_reverse";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub rel: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, rel: usize, tail: usize) -> Self {
        Self { head, rel, tail }
    }
}

/// Entity and relation name tables. Relation ids `0..raw` are the raw
/// relations in order of first appearance; id `r + raw` is the reverse of `r`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    entities: IndexSet<String>,
    relations: IndexSet<String>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_raw_relations(&self) -> usize {
        self.relations.len()
    }

    /// Raw plus reverse relations.
    pub fn num_relations(&self) -> usize {
        2 * self.relations.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entities.get_index_of(name)
    }

    pub fn entity_name(&self, id: usize) -> Option<&str> {
        self.entities.get_index(id).map(String::as_str)
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        if let Some(raw) = name.strip_suffix(REVERSE_SUFFIX) {
            if let Some(id) = self.relations.get_index_of(raw) {
                return Some(id + self.relations.len());
            }
        }
        self.relations.get_index_of(name)
    }

    pub fn relation_name(&self, id: usize) -> Option<String> {
        let raw = self.relations.len();
        if id < raw {
            self.relations.get_index(id).cloned()
        } else {
            self.relations
                .get_index(id - raw)
                .map(|n| format!("{n}{REVERSE_SUFFIX}"))
        }
    }

    /// Id of the inverse direction of relation `id`.
    pub fn reverse_of(&self, id: usize) -> usize {
        let raw = self.relations.len();
        if id < raw {
            id + raw
        } else {
            id - raw
        }
    }

    pub fn intern_entity(&mut self, name: &str) -> usize {
        match self.entities.get_index_of(name) {
            Some(id) => id,
            None => self.entities.insert_full(name.to_owned()).0,
        }
    }

    pub fn intern_relation(&mut self, name: &str) -> Result<usize> {
        if let Some(id) = self.relations.get_index_of(name) {
            return Ok(id);
        }
        if name.ends_with(REVERSE_SUFFIX) {
            return Err(GathError::Data(format!(
                "relation `{name}` uses the reserved suffix `{REVERSE_SUFFIX}`"
            )));
        }
        Ok(self.relations.insert_full(name.to_owned()).0)
    }

    /// Two-column `id<TAB>name` listings of entities and of all relations
    /// (raw then reverse).
    pub fn write_tsv<W: Write>(&self, entities: &mut W, relations: &mut W) -> std::io::Result<()> {
        for (id, name) in self.entities.iter().enumerate() {
            writeln!(entities, "{id}\t{name}")?;
        }
        for id in 0..self.num_relations() {
            writeln!(relations, "{id}\t{}", self.relation_name(id).expect("id in range"))?;
        }
        Ok(())
    }

    /// Inverse of [`Vocab::write_tsv`]. Ids must be dense and in order.
    pub fn read_tsv<R: Read>(entities: R, relations: R) -> Result<Self> {
        let mut vocab = Self::new();
        for (line_no, name) in read_id_name(entities, "entity vocab")? {
            if vocab.intern_entity(&name) != line_no || vocab.num_entities() != line_no + 1 {
                return Err(GathError::Data(format!(
                    "entity vocab: duplicate or out-of-order `{name}`"
                )));
            }
        }
        let rows = read_id_name(relations, "relation vocab")?;
        if rows.len() % 2 != 0 {
            return Err(GathError::Data(
                "relation vocab must list raw and reverse relations".into(),
            ));
        }
        let raw = rows.len() / 2;
        for (id, name) in &rows[..raw] {
            if vocab.intern_relation(name)? != *id || vocab.num_raw_relations() != id + 1 {
                return Err(GathError::Data(format!(
                    "relation vocab: duplicate or out-of-order `{name}`"
                )));
            }
        }
        for (id, name) in &rows[raw..] {
            if vocab.relation_name(*id).as_deref() != Some(name.as_str()) {
                return Err(GathError::Data(format!(
                    "relation vocab: unexpected reverse entry `{name}`"
                )));
            }
        }
        Ok(vocab)
    }
}

fn read_id_name<R: Read>(src: R, what: &str) -> Result<Vec<(usize, String)>> {
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(src).lines().enumerate() {
        let line = line.map_err(|e| GathError::Data(format!("{what}: {e}")))?;
        let (id, name) = line
            .split_once('\t')
            .ok_or_else(|| GathError::Data(format!("{what}: line {} lacks a tab", i + 1)))?;
        let id: usize = id
            .parse()
            .map_err(|_| GathError::Data(format!("{what}: line {} has a bad id", i + 1)))?;
        if id != i {
            return Err(GathError::Data(format!("{what}: line {} has id {id}", i + 1)));
        }
        rows.push((id, name.to_owned()));
    }
    Ok(rows)
}

/// Parses `head<TAB>relation<TAB>tail` lines, interning unseen names.
pub fn parse_triples(path: &Path, vocab: &mut Vocab) -> Result<Vec<Triple>> {
    let file = File::open(path).map_err(|e| GathError::io(path, e))?;
    parse_triples_from(BufReader::new(file), path, vocab)
}

pub fn parse_triples_from<R: BufRead>(reader: R, origin: &Path, vocab: &mut Vocab) -> Result<Vec<Triple>> {
    let mut triples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| GathError::io(origin, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let &[h, r, t] = fields.as_slice() else {
            return Err(GathError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        };
        let head = vocab.intern_entity(h);
        let rel = vocab.intern_relation(r).map_err(|e| GathError::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let tail = vocab.intern_entity(t);
        triples.push(Triple { head, rel, tail });
    }
    Ok(triples)
}

/// `train` followed by `(t, r + raw_rel_count, h)` for every `(h, r, t)`.
pub fn augment_reverse(train: &[Triple], raw_rel_count: usize) -> Result<Vec<Triple>> {
    if let Some(t) = train.iter().find(|t| t.rel >= raw_rel_count) {
        return Err(GathError::Data(format!(
            "relation id {} is not raw (raw count {raw_rel_count}); refusing to augment twice",
            t.rel
        )));
    }
    let mut out = Vec::with_capacity(2 * train.len());
    out.extend_from_slice(train);
    out.extend(train.iter().map(|t| Triple::new(t.tail, t.rel + raw_rel_count, t.head)));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Valid => "valid.txt",
            Split::Test => "test.txt",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = GathError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(GathError::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    pub vocab: Vocab,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    /// `train` plus the reverse of every train triple.
    pub train_aug: Vec<Triple>,
}

impl KnowledgeGraph {
    /// Loads `train.txt`, `valid.txt` and `test.txt` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_with_vocab(dir, Vocab::new())
    }

    /// Like [`KnowledgeGraph::load`], seeding the id assignment with `vocab`.
    pub fn load_with_vocab(dir: &Path, mut vocab: Vocab) -> Result<Self> {
        let mut splits = Vec::with_capacity(3);
        for split in [Split::Train, Split::Valid, Split::Test] {
            let path = dir.join(split.file_name());
            if !path.is_file() {
                return Err(GathError::Data(format!("missing split file {}", path.display())));
            }
            splits.push(parse_triples(&path, &mut vocab)?);
        }
        let test = splits.pop().unwrap();
        let valid = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Self::from_parts(vocab, train, valid, test)
    }

    pub fn from_parts(vocab: Vocab, train: Vec<Triple>, valid: Vec<Triple>, test: Vec<Triple>) -> Result<Self> {
        let (ne, nr) = (vocab.num_entities(), vocab.num_raw_relations());
        for t in train.iter().chain(&valid).chain(&test) {
            if t.head >= ne || t.tail >= ne || t.rel >= nr {
                return Err(GathError::Data(format!("triple {t:?} outside vocabulary")));
            }
        }
        let train_aug = augment_reverse(&train, nr)?;
        Ok(Self {
            vocab,
            train,
            valid,
            test,
            train_aug,
        })
    }

    /// Builds a graph from named triples held in memory.
    pub fn from_named(
        train: &[(String, String, String)],
        valid: &[(String, String, String)],
        test: &[(String, String, String)],
    ) -> Result<Self> {
        let mut vocab = Vocab::new();
        let mut intern = |rows: &[(String, String, String)]| -> Result<Vec<Triple>> {
            rows.iter()
                .map(|(h, r, t)| {
                    let head = vocab.intern_entity(h);
                    let rel = vocab.intern_relation(r)?;
                    let tail = vocab.intern_entity(t);
                    Ok(Triple { head, rel, tail })
                })
                .collect()
        };
        let train = intern(train)?;
        let valid = intern(valid)?;
        let test = intern(test)?;
        Self::from_parts(vocab, train, valid, test)
    }

    pub fn num_entities(&self) -> usize {
        self.vocab.num_entities()
    }

    pub fn num_relations(&self) -> usize {
        self.vocab.num_relations()
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn neighborhood_index(&self) -> Result<NeighborhoodIndex> {
        NeighborhoodIndex::build(&self.train_aug, self.num_entities(), self.num_relations())
    }

    /// Writes `entities.tsv` and `relations.tsv` into `dir`.
    pub fn export_vocab(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let ep = dir.join("entities.tsv");
        let rp = dir.join("relations.tsv");
        let mut e = BufWriter::new(File::create(&ep).map_err(|e| GathError::io(&ep, e))?);
        let mut r = BufWriter::new(File::create(&rp).map_err(|e| GathError::io(&rp, e))?);
        self.vocab
            .write_tsv(&mut e, &mut r)
            .and_then(|_| e.flush())
            .and_then(|_| r.flush())
            .map_err(|err| GathError::io(dir, err))?;
        Ok((ep, rp))
    }
}
