//! Layout of a run directory. Every command reads and writes artifacts here,
//! and the service is a thin view over one.

use std::path::{Path, PathBuf};

use curvesketch::geometry::{load_mesh, normalize_mesh, primitives, Mesh};
use curvesketch::pipeline::{RunConfig, Scene};
use curvesketch::{Error, Result};
use serde::{Deserialize, Serialize};

/// Built-in fixtures accepted wherever a mesh path is.
pub const BUILTIN_MESHES: [&str; 3] = ["builtin:sphere", "builtin:cylinder", "builtin:cube"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Mesh path or built-in fixture name.
    pub mesh: String,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    /// An existing run directory; fails when it has no manifest.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let run = Self { root: root.into() };
        if !run.manifest_path().exists() {
            return Err(Error::FileNotFound(run.manifest_path()));
        }
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn sdf_dir(&self) -> PathBuf {
        self.root.join("sdf")
    }
    pub fn targets_dir(&self) -> PathBuf {
        self.root.join("targets")
    }
    pub fn keypoints(&self) -> PathBuf {
        self.root.join("keypoints.json")
    }
    pub fn stage1_checkpoint(&self) -> PathBuf {
        self.root.join("stage1.ckpt.json")
    }
    pub fn stage2_checkpoint(&self) -> PathBuf {
        self.root.join("stage2.ckpt.json")
    }
    pub fn refine_checkpoint(&self) -> PathBuf {
        self.root.join("refine.ckpt.json")
    }
    pub fn stage1_curves(&self) -> PathBuf {
        self.root.join("stage1.curves.json")
    }
    /// Latest curve set of the run.
    pub fn curves(&self) -> PathBuf {
        self.root.join("curves.json")
    }
    pub fn metrics_json(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let p = self.manifest_path();
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(p, e.to_string()))
    }

    /// Records the mesh on first use; a later different mesh is refused.
    pub fn bind_mesh(&self, mesh: Option<&str>) -> Result<Manifest> {
        let existing = self.manifest_path().exists().then(|| self.manifest()).transpose()?;
        match (existing, mesh) {
            (Some(m), None) => Ok(m),
            (Some(m), Some(spec)) if m.mesh == spec => Ok(m),
            (Some(m), Some(spec)) => Err(Error::InvalidArgument(format!(
                "run directory is bound to mesh `{}`, not `{spec}`",
                m.mesh
            ))),
            (None, Some(spec)) => {
                let m = Manifest { mesh: spec.to_string() };
                let p = self.manifest_path();
                std::fs::write(&p, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&p, e))?;
                Ok(m)
            }
            (None, None) => Err(Error::InvalidArgument("no mesh given and the run directory has none recorded".into())),
        }
    }

    /// Resolves the config: explicit file, else the run's stored copy, else
    /// the paper preset; overrides apply on top.
    pub fn resolve_config(&self, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let stored = self.config();
        let file = file.or(stored.exists().then_some(stored.as_path()));
        RunConfig::load(file, overrides)
    }

    /// Writes the resolved config next to the outputs.
    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let p = self.config();
        std::fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))
    }

    pub fn mesh(&self) -> Result<Mesh> {
        resolve_mesh(&self.manifest()?.mesh)
    }

    /// Normalized mesh plus a fitted (cached) distance field.
    pub fn scene(&self, cfg: &RunConfig) -> Result<Scene> {
        Scene::fit(self.mesh()?, &cfg.sdf, &self.sdf_dir())
    }
}

/// Loads and normalizes a mesh path or built-in fixture.
pub fn resolve_mesh(spec: &str) -> Result<Mesh> {
    let raw = match spec {
        "builtin:sphere" => primitives::icosphere(3),
        "builtin:cylinder" => primitives::textured_cylinder(48, 16),
        "builtin:cube" => primitives::cube(),
        s if s.starts_with("builtin:") => {
            return Err(Error::InvalidArgument(format!(
                "unknown fixture `{s}` (known: {})",
                BUILTIN_MESHES.join(", ")
            )))
        }
        path => load_mesh(path)?,
    };
    normalize_mesh(&raw)
}
