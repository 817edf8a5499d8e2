use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::cube_io::read_cube;
use crate::data::degrade::Downsample;
use crate::data::patches::{split_patches, FusionSample, PatchConfig};
use crate::data::synth::{synth_scene, HsiCube};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub complexity: usize,
    /// HSC1 file to load instead of synthesizing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

/// Scenes plus the patching / split / response settings that turn them into samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub scenes: Vec<SceneSpec>,
    pub patches: PatchConfig,
    /// Cap on training samples taken in raster order; `None` keeps all.
    #[serde(default)]
    pub max_train: Option<usize>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

impl DatasetManifest {
    /// One 128x128x16 synthetic scene, 32x32 crops at stride 16, a 32-row
    /// held-out strip, 32 training crops.
    pub fn desk(seed: u64, scale: usize) -> Self {
        Self {
            name: "synthetic".into(),
            scenes: vec![SceneSpec {
                seed,
                height: 128,
                width: 128,
                bands: 16,
                complexity: 4,
                path: None,
            }],
            patches: PatchConfig {
                patch: 32,
                stride: 16,
                scale,
                msi_bands: 4,
                downsample: Downsample::Decimate,
                test_rows: 32,
            },
            max_train: Some(32),
        }
    }

    pub fn hsi_bands(&self) -> Result<usize> {
        let first = self.scenes.first().ok_or_else(|| invalid("manifest", "no scenes"))?;
        if self.scenes.iter().any(|s| s.bands != first.bands) {
            return Err(invalid("manifest", "scenes disagree on band count"));
        }
        Ok(first.bands)
    }

    pub fn load_scene(spec: &SceneSpec) -> Result<HsiCube> {
        match &spec.path {
            Some(p) => {
                let cube = HsiCube::from_user(read_cube(p)?.to_tensor())?;
                let (h, w, c) = cube.data.dims3()?;
                if (h, w, c) != (spec.height, spec.width, spec.bands) {
                    return Err(invalid("manifest", format!("{p} is {h}x{w}x{c}, manifest says {}x{}x{}", spec.height, spec.width, spec.bands)));
                }
                Ok(cube)
            }
            None => synth_scene(spec.seed, spec.height, spec.width, spec.bands, spec.complexity),
        }
    }

    /// Train and held-out samples over all scenes.
    pub fn build(&self) -> Result<(Vec<FusionSample<f64>>, Vec<FusionSample<f64>>)> {
        self.hsi_bands()?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for spec in &self.scenes {
            let (a, b) = split_patches(&Self::load_scene(spec)?, &self.patches)?;
            train.extend(a);
            test.extend(b);
        }
        if let Some(cap) = self.max_train {
            train.truncate(cap);
        }
        if train.is_empty() || test.is_empty() {
            return Err(invalid("manifest", "dataset yields no train or no test samples"));
        }
        Ok((train, test))
    }
}
