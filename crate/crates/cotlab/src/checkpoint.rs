//! Checkpoint files: JSON with the architecture, the model kind and every
//! parameter tensor as hexadecimal float strings, so a save/load round trip
//! is bitwise exact.

use std::path::Path;

use cotlab_core::cot::{EmbedDims, JointFlow, PhiDims, PhiParams};
use cotlab_core::params::{ParamStore, Parameterized};
use cotlab_core::pcp::JointPcp;
use cotlab_core::potentials::{FicnnDims, FicnnParams, PicnnDims, StrictPotentialParams};
use cotlab_core::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Hyper, ModelKind};
use crate::dataset_io::SidecarNorm;
use crate::hexfloat;
use crate::model::Model;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint is not valid JSON at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("unsupported checkpoint format_version {found} (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Structure(String),
    #[error("tensor {name:?}: {message}")]
    Tensor { name: String, message: String },
    #[error("non-finite value in tensor {0:?}")]
    NonFinite(String),
}

type CResult<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub picnn: Option<PicnnDims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ficnn: Option<FicnnDims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<PhiDims>,
    /// The context flow of a joint COT model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_y: Option<PhiDims>,
}

/// Flow settings; the penalty weights are hex floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CotMeta {
    pub nt: usize,
    pub alpha1: String,
    pub alpha2: String,
    pub embed: Option<EmbedDims>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub format_version: u32,
    pub model_kind: String,
    pub architecture: Architecture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<CotMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<Hyper>,
    /// Statistics of the dataset the model was trained on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<SidecarNorm>,
    pub tensors: Vec<TensorRecord>,
}

/// A loaded model with its training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub hyper: Option<Hyper>,
    pub normalization: Option<SidecarNorm>,
}

pub fn kind_name(model: &Model) -> &'static str {
    match model {
        Model::Pcp(_) => "pcp",
        Model::PcpJoint(_) => "pcp-joint",
        Model::Cot { .. } => "cot",
        Model::CotJoint { .. } => "cot-joint",
    }
}

fn encode_store(prefix: &str, store: &ParamStore, out: &mut Vec<TensorRecord>) -> CResult<()> {
    for e in store.entries() {
        let name = format!("{prefix}{}", e.name);
        let data = e.value.data().iter().map(|v| hexfloat::format(*v).map_err(|_| CheckpointError::NonFinite(name.clone()))).collect::<CResult<_>>()?;
        out.push(TensorRecord { name, rows: e.value.rows(), cols: e.value.cols(), data });
    }
    Ok(())
}

fn cot_meta(p: &PhiParams, nt: usize) -> CResult<CotMeta> {
    let hex = |v: f64| hexfloat::format(v).map_err(|_| CheckpointError::NonFinite("alpha".into()));
    Ok(CotMeta { nt, alpha1: hex(p.alpha1)?, alpha2: hex(p.alpha2)?, embed: p.dims.embed })
}

impl CheckpointFile {
    pub fn from_model(model: &Model, hyper: Option<Hyper>, normalization: Option<SidecarNorm>) -> CResult<Self> {
        let mut tensors = Vec::new();
        let mut arch = Architecture { picnn: None, ficnn: None, phi: None, phi_y: None };
        let mut cot = None;
        match model {
            Model::Pcp(p) => {
                arch.picnn = Some(p.dims());
                encode_store("", &p.store, &mut tensors)?;
            }
            Model::PcpJoint(j) => {
                arch.picnn = Some(j.pot_x.dims());
                arch.ficnn = Some(j.pot_y.dims());
                encode_store("x/", &j.pot_x.store, &mut tensors)?;
                encode_store("y/", &j.pot_y.store, &mut tensors)?;
            }
            Model::Cot { params, nt } => {
                arch.phi = Some(params.dims);
                cot = Some(cot_meta(params, *nt)?);
                encode_store("", &params.store, &mut tensors)?;
            }
            Model::CotJoint { model: j, nt } => {
                if (j.phi_x.alpha1, j.phi_x.alpha2) != (j.phi_y.alpha1, j.phi_y.alpha2) {
                    return Err(CheckpointError::Structure("joint flow blocks must share penalty weights".into()));
                }
                arch.phi = Some(j.phi_x.dims);
                arch.phi_y = Some(j.phi_y.dims);
                cot = Some(cot_meta(&j.phi_x, *nt)?);
                encode_store("x/", &j.phi_x.store, &mut tensors)?;
                encode_store("y/", &j.phi_y.store, &mut tensors)?;
            }
        }
        Ok(Self { format_version: FORMAT_VERSION, model_kind: kind_name(model).into(), architecture: arch, cot, hyper, normalization, tensors })
    }

    /// Rebuilds the model. `expected` rejects a checkpoint of the other
    /// model family.
    pub fn into_checkpoint(self, expected: Option<ModelKind>) -> CResult<Checkpoint> {
        if self.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: self.format_version.into(), expected: FORMAT_VERSION });
        }
        let family = match self.model_kind.as_str() {
            "pcp" | "pcp-joint" => ModelKind::Pcp,
            "cot" | "cot-joint" => ModelKind::Cot,
            other => return Err(CheckpointError::Structure(format!("unknown model_kind {other:?}"))),
        };
        if let Some(k) = expected.filter(|&k| k != family) {
            return Err(CheckpointError::KindMismatch { expected: k.name().into(), found: self.model_kind });
        }
        let arch = &self.architecture;
        let missing = |what: &str| CheckpointError::Structure(format!("{} checkpoint lacks architecture.{what}", self.model_kind));
        let mut tensors = Tensors::new(&self.tensors)?;
        let core = |e: cotlab_core::CoreError| CheckpointError::Structure(e.to_string());
        let model = match self.model_kind.as_str() {
            "pcp" => {
                let mut p = StrictPotentialParams::init(arch.picnn.ok_or_else(|| missing("picnn"))?, 0).map_err(core)?;
                tensors.fill("", &mut p)?;
                Model::Pcp(p)
            }
            "pcp-joint" => {
                let mut pot_x = StrictPotentialParams::init(arch.picnn.ok_or_else(|| missing("picnn"))?, 0).map_err(core)?;
                let mut pot_y = FicnnParams::init(arch.ficnn.ok_or_else(|| missing("ficnn"))?, 0).map_err(core)?;
                tensors.fill("x/", &mut pot_x)?;
                tensors.fill("y/", &mut pot_y)?;
                Model::PcpJoint(JointPcp { pot_x, pot_y })
            }
            _ => {
                let meta = self.cot.as_ref().ok_or_else(|| CheckpointError::Structure("flow checkpoint lacks the cot section".into()))?;
                let hex = |s: &str| hexfloat::parse(s).map_err(|e| CheckpointError::Structure(e.to_string()));
                let (a1, a2) = (hex(&meta.alpha1)?, hex(&meta.alpha2)?);
                let dims = arch.phi.ok_or_else(|| missing("phi"))?;
                if dims.embed != meta.embed {
                    return Err(CheckpointError::Structure("embedding dims disagree with the architecture".into()));
                }
                let mut phi_x = PhiParams::init(dims, a1, a2, 0).map_err(core)?;
                if self.model_kind == "cot" {
                    tensors.fill("", &mut phi_x)?;
                    Model::Cot { params: phi_x, nt: meta.nt }
                } else {
                    let mut phi_y = PhiParams::init(arch.phi_y.ok_or_else(|| missing("phi_y"))?, a1, a2, 0).map_err(core)?;
                    tensors.fill("x/", &mut phi_x)?;
                    tensors.fill("y/", &mut phi_y)?;
                    Model::CotJoint { model: JointFlow { phi_x, phi_y }, nt: meta.nt }
                }
            }
        };
        tensors.finish()?;
        Ok(Checkpoint { model, hyper: self.hyper, normalization: self.normalization })
    }
}

/// Decoded tensors, consumed by name.
struct Tensors {
    items: Vec<(String, Option<Tensor>)>,
}

impl Tensors {
    fn new(records: &[TensorRecord]) -> CResult<Self> {
        let mut items: Vec<(String, Option<Tensor>)> = Vec::with_capacity(records.len());
        for r in records {
            let bad = |message: String| CheckpointError::Tensor { name: r.name.clone(), message };
            if items.iter().any(|(n, _)| *n == r.name) {
                return Err(bad("duplicate name".into()));
            }
            if r.data.len() != r.rows * r.cols {
                return Err(bad(format!("{} values for shape {}x{}", r.data.len(), r.rows, r.cols)));
            }
            let data = r.data.iter().map(|s| hexfloat::parse(s).map_err(|e| bad(e.to_string()))).collect::<CResult<Vec<f64>>>()?;
            items.push((r.name.clone(), Some(Tensor::from_vec(r.rows, r.cols, data))));
        }
        Ok(Self { items })
    }

    fn fill<P: Parameterized>(&mut self, prefix: &str, p: &mut P) -> CResult<()> {
        for e in p.store_mut().entries_mut() {
            let name = format!("{prefix}{}", e.name);
            let slot = self.items.iter_mut().find(|(n, _)| *n == name).and_then(|(_, t)| t.take());
            let t = slot.ok_or_else(|| CheckpointError::Tensor { name: name.clone(), message: "missing".into() })?;
            if t.shape() != e.value.shape() {
                let message = format!("shape {}x{}, expected {}x{}", t.rows(), t.cols(), e.value.rows(), e.value.cols());
                return Err(CheckpointError::Tensor { name, message });
            }
            e.value = t;
        }
        Ok(())
    }

    fn finish(self) -> CResult<()> {
        match self.items.into_iter().find(|(_, t)| t.is_some()) {
            Some((name, _)) => Err(CheckpointError::Tensor { name, message: "not part of the architecture".into() }),
            None => Ok(()),
        }
    }
}

pub fn to_json(model: &Model, hyper: Option<Hyper>, normalization: Option<SidecarNorm>) -> CResult<String> {
    let file = CheckpointFile::from_model(model, hyper, normalization)?;
    Ok(serde_json::to_string_pretty(&file).expect("checkpoint serializes") + "\n")
}

pub fn from_json(text: &str, expected: Option<ModelKind>) -> CResult<Checkpoint> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CheckpointError::Parse { line: e.line(), column: e.column(), message: e.to_string() })?;
    match value.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(found) => return Err(CheckpointError::Version { found, expected: FORMAT_VERSION }),
        None => return Err(CheckpointError::Structure("missing format_version".into())),
    }
    let file: CheckpointFile = serde_json::from_value(value).map_err(|e| CheckpointError::Structure(e.to_string()))?;
    file.into_checkpoint(expected)
}

pub fn save(path: &Path, model: &Model, hyper: Option<Hyper>, normalization: Option<SidecarNorm>) -> crate::error::Result<()> {
    let text = to_json(model, hyper, normalization)?;
    std::fs::write(path, text).map_err(|e| crate::error::Error::io(path, e))
}

pub fn load(path: &Path, expected: Option<ModelKind>) -> crate::error::Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::error::Error::io(path, e))?;
    Ok(from_json(&text, expected)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcp() -> Model {
        Model::Pcp(StrictPotentialParams::init(PicnnDims { n: 2, m: 1, depth: 3, width: 8, context: 4 }, 7).unwrap())
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dims = PhiDims::new(2, 3, 6, Some(EmbedDims { hidden: 5, output: 4 }));
        let models = [
            pcp(),
            Model::Cot { params: PhiParams::init(dims, 0.3, 17.0, 3).unwrap(), nt: 8 },
            Model::PcpJoint(JointPcp {
                pot_x: StrictPotentialParams::init(PicnnDims { n: 1, m: 2, depth: 2, width: 4, context: 2 }, 1).unwrap(),
                pot_y: FicnnParams::init(FicnnDims { m: 2, depth: 2, width: 4 }, 2).unwrap(),
            }),
        ];
        for m in models {
            let back = from_json(&to_json(&m, None, None).unwrap(), None).unwrap().model;
            assert_eq!(back, m);
        }
    }

    #[test]
    fn version_and_kind_are_checked() {
        let text = to_json(&pcp(), None, None).unwrap();
        assert!(matches!(from_json(&text, Some(ModelKind::Cot)), Err(CheckpointError::KindMismatch { .. })));
        let v2 = text.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(from_json(&v2, None), Err(CheckpointError::Version { found: 2, .. })));
        let cut = &text[..text.len() / 2];
        assert!(matches!(from_json(cut, None), Err(CheckpointError::Parse { .. })));
    }
}
