//! Versioned JSON documents for trained models, and atomic file output.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::MlpModel;
use crate::datakit::Standardization;
use crate::error::{Error, Result};
use crate::gradengine::ParamStore;
use crate::structnet::{ModelConfig, StructuralCfn, Task};

pub const FORMAT: &str = "structcfn-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    StructuralCfn,
    Mlp,
}

/// Everything needed to rebuild a model bit-for-bit.
///
/// Parameters are written with shortest round-trip decimal digits, so
/// `load(save(m))` reproduces every `f64` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    /// Architecture (ignored for the MLP) and training hyperparameters.
    pub config: ModelConfig,
    pub task: Task,
    pub n_features: usize,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub standardization: Option<Standardization>,
    pub param_names: Vec<String>,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Cfn(StructuralCfn),
    Mlp(MlpModel),
}

impl AnyModel {
    pub fn store(&self) -> &ParamStore {
        match self {
            AnyModel::Cfn(m) => m.store(),
            AnyModel::Mlp(m) => m.store(),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Cfn(_) => ModelKind::StructuralCfn,
            AnyModel::Mlp(_) => ModelKind::Mlp,
        }
    }
}

impl ModelDocument {
    #[allow(clippy::too_many_arguments)]
    fn build(
        kind: ModelKind,
        config: &ModelConfig,
        task: Task,
        n_features: usize,
        store: &ParamStore,
        feature_names: &[String],
        target_name: &str,
        standardization: Option<&Standardization>,
    ) -> Self {
        let feature_names = if feature_names.len() == n_features {
            feature_names.to_vec()
        } else {
            (0..n_features).map(|k| format!("x{k}")).collect()
        };
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            kind,
            config: config.clone(),
            task,
            n_features,
            feature_names,
            target_name: target_name.to_string(),
            standardization: standardization.cloned(),
            param_names: store.names().to_vec(),
            params: store.values().to_vec(),
        }
    }

    pub fn from_cfn(
        model: &StructuralCfn,
        feature_names: &[String],
        target_name: &str,
        standardization: Option<&Standardization>,
    ) -> Self {
        Self::build(
            ModelKind::StructuralCfn,
            model.config(),
            model.config().task,
            model.n_features(),
            model.store(),
            feature_names,
            target_name,
            standardization,
        )
    }

    /// `config` records the training hyperparameters used for the baseline.
    pub fn from_mlp(
        model: &MlpModel,
        config: &ModelConfig,
        feature_names: &[String],
        target_name: &str,
        standardization: Option<&Standardization>,
    ) -> Self {
        Self::build(
            ModelKind::Mlp,
            config,
            model.task(),
            model.n_features(),
            model.store(),
            feature_names,
            target_name,
            standardization,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.format != FORMAT {
            return Err(Error::Document(format!(
                "expected format '{FORMAT}', found '{}'",
                doc.format
            )));
        }
        if doc.version != VERSION {
            return Err(Error::Document(format!(
                "unsupported version {} (this build reads {VERSION})",
                doc.version
            )));
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    /// Rebuilds the model and checks that the parameter inventory matches.
    pub fn to_model(&self) -> Result<AnyModel> {
        let mut model = match self.kind {
            ModelKind::StructuralCfn => {
                if self.config.n_features != self.n_features || self.config.task != self.task {
                    return Err(Error::Document("config disagrees with n_features/task".into()));
                }
                AnyModel::Cfn(StructuralCfn::new(self.config.clone())?)
            }
            ModelKind::Mlp => AnyModel::Mlp(MlpModel::new(self.n_features, self.task)?),
        };
        if model.store().names() != self.param_names.as_slice() {
            return Err(Error::Document(format!(
                "parameter names do not match a {:?} model with this config ({} stored, {} expected)",
                self.kind,
                self.param_names.len(),
                model.store().len()
            )));
        }
        if let Some(k) = self.params.iter().position(|v| !v.is_finite()) {
            return Err(Error::Document(format!(
                "parameter '{}' is not finite",
                self.param_names[k]
            )));
        }
        match &mut model {
            AnyModel::Cfn(m) => m.store_mut().set_values(&self.params)?,
            AnyModel::Mlp(m) => m.store_mut().set_values(&self.params)?,
        }
        Ok(model)
    }

    pub fn to_cfn(&self) -> Result<StructuralCfn> {
        match self.to_model()? {
            AnyModel::Cfn(m) => Ok(m),
            AnyModel::Mlp(_) => Err(Error::Document("this document holds an MLP baseline".into())),
        }
    }
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("'{}' is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}
