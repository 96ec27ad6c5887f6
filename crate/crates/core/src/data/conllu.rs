//! CoNLL-U reading and writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// One dependency-annotated sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    /// 0-based position of the sentence in its source file.
    pub id: u64,
    pub tokens: Vec<String>,
    /// 1-based head positions; 0 is the root.
    pub heads: Vec<usize>,
    pub labels: Vec<String>,
    pub pos: Vec<String>,
    pub lemmas: Vec<String>,
    pub xpos: Vec<String>,
    pub feats: Vec<String>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Builds a sentence with placeholder lemma/xpos/feats columns.
    pub fn new(
        id: u64,
        tokens: Vec<String>,
        heads: Vec<usize>,
        labels: Vec<String>,
        pos: Vec<String>,
    ) -> Self {
        let n = tokens.len();
        Sentence {
            id,
            lemmas: tokens.clone(),
            xpos: vec!["_".to_string(); n],
            feats: vec!["_".to_string(); n],
            tokens,
            heads,
            labels,
            pos,
        }
    }

    /// Value of a morphological feature (e.g. `Number`) for each token.
    pub fn feature(&self, name: &str) -> Vec<String> {
        self.feats
            .iter()
            .map(|f| {
                f.split('|')
                    .filter_map(|kv| kv.split_once('='))
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| v.to_string())
                    .unwrap_or_else(|| "_".to_string())
            })
            .collect()
    }
}

/// Checks that `heads` (1-based, 0 = root) form a single-rooted arborescence.
pub fn validate_heads(heads: &[usize]) -> std::result::Result<(), String> {
    let n = heads.len();
    if n == 0 {
        return Err("empty sentence".into());
    }
    if let Some(&h) = heads.iter().find(|&&h| h > n) {
        return Err(format!("head {h} out of range 0..={n}"));
    }
    let roots = heads.iter().filter(|&&h| h == 0).count();
    if roots != 1 {
        return Err(format!("{roots} root attachments, expected exactly one"));
    }
    // Depth-first search from the root over child lists.
    let mut children = vec![Vec::new(); n + 1];
    for (m, &h) in heads.iter().enumerate() {
        children[h].push(m + 1);
    }
    let mut seen = vec![false; n + 1];
    let mut stack = vec![0];
    seen[0] = true;
    let mut reached = 0;
    while let Some(v) = stack.pop() {
        for &c in &children[v] {
            if !seen[c] {
                seen[c] = true;
                reached += 1;
                stack.push(c);
            }
        }
    }
    if reached != n {
        return Err("heads contain a cycle".into());
    }
    Ok(())
}

/// Sentences read from a CoNLL-U file plus the number rejected by tree
/// validation.
#[derive(Debug)]
pub struct Treebank {
    pub sentences: Vec<Sentence>,
    pub dropped: usize,
}

struct Pending {
    tokens: Vec<String>,
    lemmas: Vec<String>,
    pos: Vec<String>,
    xpos: Vec<String>,
    feats: Vec<String>,
    heads: Vec<usize>,
    labels: Vec<String>,
}

impl Pending {
    fn new() -> Self {
        Pending {
            tokens: Vec::new(),
            lemmas: Vec::new(),
            pos: Vec::new(),
            xpos: Vec::new(),
            feats: Vec::new(),
            heads: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn read_conllu(path: impl AsRef<Path>) -> Result<Treebank> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_conllu(&text, &path.display().to_string())
}

/// Parses CoNLL-U text. `origin` names the source in error messages.
pub fn parse_conllu(text: &str, origin: &str) -> Result<Treebank> {
    let mut sentences = Vec::new();
    let mut dropped = 0;
    let mut next_id = 0u64;
    let mut cur = Pending::new();

    let mut finish = |cur: &mut Pending, sentences: &mut Vec<Sentence>, dropped: &mut usize| {
        if cur.is_empty() {
            return;
        }
        let p = std::mem::replace(cur, Pending::new());
        let id = next_id;
        next_id += 1;
        match validate_heads(&p.heads) {
            Ok(()) => sentences.push(Sentence {
                id,
                tokens: p.tokens,
                heads: p.heads,
                labels: p.labels,
                pos: p.pos,
                lemmas: p.lemmas,
                xpos: p.xpos,
                feats: p.feats,
            }),
            Err(reason) => {
                log::warn!("{origin}: dropping sentence {id}: {reason}");
                *dropped += 1;
            }
        }
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            finish(&mut cur, &mut sentences, &mut dropped);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: lineno + 1,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(err(format!("expected 10 tab-separated columns, found {}", cols.len())));
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            // Multiword ranges and empty nodes.
            continue;
        }
        let position: usize = id
            .parse()
            .map_err(|_| err(format!("invalid token id '{id}'")))?;
        if position != cur.tokens.len() + 1 {
            return Err(err(format!(
                "token id {position} out of sequence, expected {}",
                cur.tokens.len() + 1
            )));
        }
        let head: usize = cols[6]
            .parse()
            .map_err(|_| err(format!("non-integer head '{}'", cols[6])))?;
        cur.tokens.push(cols[1].to_string());
        cur.lemmas.push(cols[2].to_string());
        cur.pos.push(cols[3].to_string());
        cur.xpos.push(cols[4].to_string());
        cur.feats.push(cols[5].to_string());
        cur.heads.push(head);
        cur.labels.push(cols[7].to_string());
    }
    finish(&mut cur, &mut sentences, &mut dropped);
    Ok(Treebank { sentences, dropped })
}

/// Writes sentences as CoNLL-U. When `predicted` is given, its heads and
/// labels replace the gold HEAD/DEPREL columns.
pub fn write_conllu<W: Write>(
    out: &mut W,
    sentences: &[Sentence],
    predicted: Option<&[(Vec<usize>, Vec<String>)]>,
) -> Result<()> {
    for (i, s) in sentences.iter().enumerate() {
        writeln!(out, "# sent_id = {}", s.id)?;
        let (heads, labels) = match predicted {
            Some(p) => (&p[i].0, &p[i].1),
            None => (&s.heads, &s.labels),
        };
        for m in 0..s.len() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t_\t_",
                m + 1,
                s.tokens[m],
                s.lemmas[m],
                s.pos[m],
                s.xpos[m],
                s.feats[m],
                heads[m],
                labels[m]
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}
