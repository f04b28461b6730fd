//! Versioned JSON documents for trained models.
//!
//! Every file is `{"format", "version", "component", "model"}`. Loading
//! checks all three header fields and then the model's own dimensions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ClassifierHistory, ClassifierNet};
use crate::imageproc::AugmentSpec;
use crate::loss::{FocalParams, TaskWeights};
use crate::mtlnet::{MtlNet, TrainHistory, TrainSchedule};
use crate::triage::{CandidateSummary, TriagePolicy};

pub const FORMAT: &str = "deferral-model";
pub const VERSION: u32 = 1;

pub trait Component: Serialize + DeserializeOwned {
    const TAG: &'static str;
    fn check(&self) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub format: String,
    pub version: u32,
    pub component: String,
    pub model: T,
}

/// Per-view network with everything needed to reproduce its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtlModel {
    pub net: MtlNet,
    pub augment: AugmentSpec,
    pub schedule: TrainSchedule,
    pub weights: TaskWeights,
    pub focal: FocalParams,
    pub history: TrainHistory,
}

impl Component for MtlModel {
    const TAG: &'static str = "mtl";
    fn check(&self) -> Result<()> {
        self.net.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub net: ClassifierNet,
    pub schedule: TrainSchedule,
    pub focal: FocalParams,
    pub history: ClassifierHistory,
}

impl Component for ClassifierModel {
    const TAG: &'static str = "classifier";
    fn check(&self) -> Result<()> {
        self.net.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub policy: TriagePolicy,
    pub candidates: Vec<CandidateSummary>,
}

impl Component for PolicyModel {
    const TAG: &'static str = "triage";
    fn check(&self) -> Result<()> {
        self.policy.validate()
    }
}

pub fn to_json<T: Component>(model: &T) -> Result<String> {
    let env = Envelope { format: FORMAT.into(), version: VERSION, component: T::TAG.into(), model };
    Ok(serde_json::to_string(&env)?)
}

pub fn from_json<T: Component>(s: &str) -> Result<T> {
    check_envelope::<T>(serde_json::from_str(s)?)
}

fn check_envelope<T: Component>(env: Envelope<T>) -> Result<T> {
    if env.format != FORMAT {
        return Err(Error::Model(format!("format `{}`", env.format)));
    }
    if env.version != VERSION {
        return Err(Error::Model(format!("version {}", env.version)));
    }
    if env.component != T::TAG {
        return Err(Error::Model(format!("expected component `{}`, found `{}`", T::TAG, env.component)));
    }
    env.model.check()?;
    Ok(env.model)
}

pub fn save<T: Component>(path: &Path, model: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(to_json(model)?.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Component>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    check_envelope::<T>(serde_json::from_reader(BufReader::new(f))?)
}
