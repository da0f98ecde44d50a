//! On-disk scene directories.
//!
//! ```text
//! scene.json              recipe (synthetic scenes only)
//! scene.conf              config selecting the file provider below
//! frames/frame_0000.png   monocular video
//! lf/lf_0000.png          ground-truth light field grids, when known
//! depth/depth_0000.pfm    relative depth per frame
//! flow/flow_c0000_to_c0001.flo
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lfvid::config::{ProviderKind, RunConfig};
use lfvid::datagen::{FileProvider, Provider, SceneRecipe, SceneTruth, RECIPE_FILE};
use lfvid::io::{load_lf, load_png};
use lfvid::{AffineDepthParams, AngularGrid, DisparityMap, Image, LightField};

use crate::{ProviderFailed, Usage};

pub const FRAMES_DIR: &str = "frames";
pub const LF_DIR: &str = "lf";
pub const DEPTH_DIR: &str = "depth";
pub const FLOW_DIR: &str = "flow";

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:04}.png")
}

pub fn lf_name(t: usize) -> String {
    format!("lf_{t:04}.png")
}

/// Tags provider errors so they map to their own exit code. A missing file
/// stays a missing input.
pub fn provider_step<T>(r: lfvid::Result<T>) -> Result<T> {
    match r {
        Ok(v) => Ok(v),
        Err(e @ lfvid::Error::MissingFile(_)) => Err(e.into()),
        Err(e) => Err(anyhow::Error::new(e).context(ProviderFailed)),
    }
}

/// Sorted `*.png` files of a directory.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(lfvid::Error::MissingFile(dir.to_path_buf()).into());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(lfvid::Error::MissingFile(dir.join("*.png")).into());
    }
    Ok(files)
}

pub fn load_lfs(dir: &Path, grid: AngularGrid) -> Result<Vec<LightField>> {
    png_files(dir)?
        .iter()
        .map(|p| load_lf(p, grid).with_context(|| format!("loading {}", p.display())))
        .collect()
}

pub enum Source {
    Oracle(Box<SceneTruth>),
    Files(FileProvider),
}

impl Source {
    pub fn provider(&self) -> &dyn Provider {
        match self {
            Source::Oracle(t) => t.as_ref(),
            Source::Files(f) => f,
        }
    }

    pub fn truth(&self) -> Option<&SceneTruth> {
        match self {
            Source::Oracle(t) => Some(t),
            Source::Files(_) => None,
        }
    }

    pub fn affine(&self) -> AffineDepthParams {
        self.provider().affine().expect("both sources carry an affine map")
    }

    /// Disparity of frame `t` through the source's affine map.
    pub fn disparity(&self, t: usize) -> Result<DisparityMap> {
        let z = provider_step(self.provider().depth(t))?;
        Ok(lfvid::depth_to_disparity(&z, self.affine()))
    }
}

pub struct SceneDir {
    pub root: PathBuf,
}

impl SceneDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn name(&self) -> String {
        self.root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into())
    }

    pub fn frames_dir(&self) -> PathBuf {
        self.root.join(FRAMES_DIR)
    }

    pub fn lf_dir(&self) -> PathBuf {
        self.root.join(LF_DIR)
    }

    pub fn lf_path(&self, t: usize) -> PathBuf {
        self.lf_dir().join(lf_name(t))
    }

    pub fn recipe(&self) -> Result<Option<SceneRecipe>> {
        if !self.root.join(RECIPE_FILE).exists() {
            return Ok(None);
        }
        Ok(Some(SceneRecipe::load(&self.root)?))
    }

    pub fn frames(&self) -> Result<Vec<Image>> {
        png_files(&self.frames_dir())?
            .iter()
            .map(|p| load_png(p).with_context(|| format!("loading {}", p.display())))
            .collect()
    }

    /// Ground-truth light field of frame `t`, if the scene has one.
    pub fn truth_lf(&self, t: usize, grid: AngularGrid) -> Result<Option<LightField>> {
        let path = self.lf_path(t);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(load_lf(&path, grid)?))
    }

    /// Depth and flow source selected by the config.
    pub fn source(&self, config: &RunConfig) -> Result<Source> {
        let recipe = self.recipe()?;
        match config.provider.kind {
            ProviderKind::Oracle => {
                let recipe = recipe.ok_or_else(|| {
                    anyhow::Error::new(lfvid::Error::MissingFile(self.root.join(RECIPE_FILE)))
                        .context("the oracle provider needs a generated scene")
                })?;
                Ok(Source::Oracle(Box::new(provider_step(recipe.generate())?)))
            }
            ProviderKind::Files => {
                let p = &config.provider;
                let affine = match (p.a, p.b, recipe) {
                    (Some(a), Some(b), _) => AffineDepthParams::new(a, b)?,
                    (None, None, Some(r)) => provider_step(r.generate())?.affine(),
                    _ => {
                        return Err(Usage(
                            "the file provider needs provider.a and provider.b, or a scene recipe".into(),
                        )
                        .into())
                    }
                };
                Ok(Source::Files(FileProvider {
                    depth_dir: p.depth_dir.clone().unwrap_or_else(|| self.root.join(DEPTH_DIR)),
                    flow_dir: p.flow_dir.clone().unwrap_or_else(|| self.root.join(FLOW_DIR)),
                    affine,
                }))
            }
        }
    }
}
