//! Synthetic scenes, Wald-style degradation, patching and cube files.

pub mod cube_io;
pub mod degrade;
pub mod manifest;
pub mod patches;
pub mod synth;

pub use cube_io::{decode_cube, encode_cube, read_cube, write_cube, CubeData};
pub use degrade::{blur_kernel, degrade_lrhsi, simulate_hrmsi, Downsample, SpectralResponse, BLUR_SIGMA};
pub use manifest::{DatasetManifest, SceneSpec};
pub use patches::{extract_patches, split_patches, FusionSample, PatchConfig};
pub use synth::{synth_scene, HsiCube, Provenance};
