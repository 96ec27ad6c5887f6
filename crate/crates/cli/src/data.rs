//! Loads splits either from CoNLL-U + EMB1 files or from the synthetic
//! generator, and remembers which files were read.

use std::path::{Path, PathBuf};

use vibtag::data::{align, read_conllu, read_embeddings, Dataset};
use vibtag::synthetic::{generate, SyntheticCorpus};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

pub struct Loader<'a> {
    cfg: &'a RunConfig,
    demo: bool,
    corpus: Option<SyntheticCorpus>,
    pub inputs: Vec<PathBuf>,
}

impl<'a> Loader<'a> {
    pub fn new(cfg: &'a RunConfig, demo: bool) -> Self {
        Loader {
            cfg,
            demo,
            corpus: None,
            inputs: Vec::new(),
        }
    }

    fn paths(&self, split: Split) -> (Option<&'a Path>, Option<&'a Path>) {
        let d = &self.cfg.data;
        let (c, e) = match split {
            Split::Train => (&d.train_conllu, &d.train_emb),
            Split::Dev => (&d.dev_conllu, &d.dev_emb),
            Split::Test => (&d.test_conllu, &d.test_emb),
        };
        (c.as_deref(), e.as_deref())
    }

    /// `Ok(None)` only for an unconfigured dev split.
    pub fn load(&mut self, split: Split, token_layer: usize) -> Result<Option<Dataset>, CliError> {
        if self.demo {
            if token_layer != 1 {
                return Err(CliError::Usage(format!(
                    "the demo corpus has token layer 1 only, not {token_layer}"
                )));
            }
            if self.corpus.is_none() {
                self.corpus = Some(generate(&self.cfg.demo)?);
            }
            let c = self.corpus.as_ref().expect("generated above");
            let ds = match split {
                Split::Train => &c.train,
                Split::Dev => &c.dev,
                Split::Test => &c.test,
            };
            return Ok((!ds.is_empty() || split != Split::Dev).then(|| ds.clone()));
        }
        let name = split.name();
        let (conllu, emb) = match self.paths(split) {
            (Some(c), Some(e)) => (c, e),
            (None, None) if split == Split::Dev => return Ok(None),
            (None, None) => {
                return Err(CliError::Usage(format!(
                    "no {name} data: set data.{name}_conllu and data.{name}_emb or pass --demo"
                )))
            }
            _ => {
                return Err(CliError::Usage(format!(
                    "data.{name}_conllu and data.{name}_emb must be given together"
                )))
            }
        };
        let bank = read_conllu(conllu)?;
        let embeddings = read_embeddings(emb)?;
        self.inputs.push(conllu.to_path_buf());
        self.inputs.push(emb.to_path_buf());
        let (ds, report) = align(bank.sentences, &embeddings, token_layer, self.cfg.data.max_len)?;
        log::info!(
            "{name}: {} sentences kept, {} malformed, {} too long, {} without embeddings",
            report.kept,
            bank.dropped,
            report.too_long,
            report.missing_embeddings
        );
        if ds.is_empty() {
            return Err(CliError::Data(format!("{name} split is empty after alignment")));
        }
        Ok(Some(ds))
    }

    pub fn require(&mut self, split: Split, token_layer: usize) -> Result<Dataset, CliError> {
        self.load(split, token_layer)?
            .ok_or_else(|| CliError::Usage(format!("the {} split is required", split.name())))
    }
}
