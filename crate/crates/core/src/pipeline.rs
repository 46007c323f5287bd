//! Dataset directories and the config-driven prepare/train sequence shared by
//! the CLI, tests and benches.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::advtrain::{train, TrainOutcome};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::featpipe::PreparedPanel;
use crate::panel::{load_embeddings, load_macro, load_panel, EmbeddingSet, MacroSeries, Panel, SplitName};
use crate::sdfnet::Model;
use crate::synthlab::SynthData;

/// Files of a dataset directory, in digest order.
pub const DATA_FILES: [&str; 4] = ["returns.csv", "characteristics.csv", "macro.csv", "embeddings.csv"];

#[derive(Clone, Debug)]
pub struct Dataset {
    pub panel: Panel,
    pub macro_series: MacroSeries,
    pub embeddings: EmbeddingSet,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Dataset {
            panel: load_panel(&dir.join(DATA_FILES[0]), &dir.join(DATA_FILES[1]))?,
            macro_series: load_macro(&dir.join(DATA_FILES[2]))?,
            embeddings: load_embeddings(&dir.join(DATA_FILES[3]))?,
        })
    }

    pub fn from_synth(data: &SynthData) -> Self {
        Dataset {
            panel: data.panel.clone(),
            macro_series: data.macro_series.clone(),
            embeddings: data.embeddings.clone(),
        }
    }
}

/// SHA-256 over the names and contents of the four data files.
pub fn data_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in DATA_FILES {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Prepared features with the block indices of each split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub prep: PreparedPanel,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Prepared {
    pub fn blocks(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

pub fn prepare(ds: &Dataset, cfg: &RunConfig) -> Result<Prepared> {
    let prep = PreparedPanel::build(&ds.panel, &ds.macro_series, &ds.embeddings, &cfg.features)?;
    let pick = |which| {
        let (a, b) = cfg.split.range(which);
        prep.blocks_in(a, b)
    };
    let (train, val, test) = (pick(SplitName::Train), pick(SplitName::Val), pick(SplitName::Test));
    for (name, blocks) in [("train", &train), ("val", &val)] {
        if blocks.is_empty() {
            return Err(Error::data("panel", None, format!("the {name} split holds no usable period")));
        }
    }
    Ok(Prepared {
        prep,
        train,
        val,
        test,
    })
}

/// Initializes a model from `cfg.seed` and trains it.
pub fn fit(p: &Prepared, cfg: &RunConfig, data_digest: &str) -> Result<TrainOutcome> {
    let model = Model::init(&p.prep, &p.train, &cfg.features, &cfg.net, cfg.seed)?;
    train(model, &p.prep, &p.train, &p.val, cfg, data_digest)
}
