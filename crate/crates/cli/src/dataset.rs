//! On-disk dataset: one flat binary record per scene plus a JSON manifest.
//!
//! Scene record layout (little-endian): w u32 | h u32 | image f64 * 3hw |
//! label u8 * hw. The manifest lists every group with its corruption spec
//! and per-scene seeds, which is enough to regenerate the dataset exactly.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use roadseg_core::rng;
use roadseg_core::tensor::{BinaryMask, Tensor};
use roadseg_core::weather::{corrupt, generate_scene, CorruptionSpec, Scene};

use crate::config::DatasetRecipe;
use crate::parallel;

pub const CLEAN_TRAIN: &str = "clean_train";
pub const CLEAN_HOLDOUT: &str = "clean_holdout";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub file: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub corruption: Option<CorruptionSpec>,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub groups: Vec<GroupEntry>,
}

impl Manifest {
    pub fn group(&self, name: &str) -> Result<&GroupEntry> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .with_context(|| format!("dataset has no group '{name}'"))
    }

    /// Names of the corrupted (target-domain) groups, in manifest order.
    pub fn target_group_names(&self) -> Vec<String> {
        self.groups
            .iter()
            .filter(|g| g.corruption.is_some())
            .map(|g| g.name.clone())
            .collect()
    }
}

pub fn scene_to_bytes(scene: &Scene) -> Vec<u8> {
    let shape = scene.image.shape();
    let (h, w) = (shape[1], shape[2]);
    let mut out = Vec::with_capacity(8 + scene.image.len() * 8 + scene.label.len());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for &v in scene.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(scene.label.data());
    out
}

pub fn scene_from_bytes(bytes: &[u8], seed: u64, corruption: Option<CorruptionSpec>) -> Result<Scene> {
    if bytes.len() < 8 {
        bail!("scene record too short");
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let image_bytes = 3 * h * w * 8;
    let expected = 8 + image_bytes + h * w;
    if bytes.len() != expected {
        bail!("scene record is {} bytes, expected {expected}", bytes.len());
    }
    let image: Vec<f64> = bytes[8..8 + image_bytes]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let label = bytes[8 + image_bytes..].to_vec();
    Ok(Scene {
        image: Tensor::new(vec![3, h, w], image).map_err(|e| anyhow::anyhow!("{e}"))?,
        label: BinaryMask::new(h, w, label).map_err(|e| anyhow::anyhow!("{e}"))?,
        seed,
        corruption,
    })
}

/// Generate every group of the recipe under `dir` and write the manifest.
/// Target groups apply each ladder corruption to the same base scenes.
pub fn write_dataset(dir: &Path, recipe: &DatasetRecipe, seed: u64) -> Result<Manifest> {
    recipe.validate()?;
    let scenes_dir = dir.join("scenes");
    std::fs::create_dir_all(&scenes_dir)
        .with_context(|| format!("creating {}", scenes_dir.display()))?;

    let (w, h) = (recipe.width, recipe.height);
    let mut groups = Vec::new();

    let clean_specs: [(&str, &str, usize); 2] = [
        (CLEAN_TRAIN, "train", recipe.train_scenes),
        (CLEAN_HOLDOUT, "holdout", recipe.holdout_scenes),
    ];
    for (group_name, purpose, count) in clean_specs {
        if count == 0 {
            continue;
        }
        let seeds: Vec<u64> = (0..count)
            .map(|i| rng::derive_seed_indexed(seed, purpose, i as u64))
            .collect();
        let scenes = parallel::ordered_map(&seeds, |_, &s| generate_scene(s, w, h));
        let mut entries = Vec::with_capacity(count);
        for (i, scene) in scenes.into_iter().enumerate() {
            let scene = scene.map_err(|e| anyhow::anyhow!("{e}"))?;
            let file = format!("{group_name}_{i:05}.bin");
            std::fs::write(scenes_dir.join(&file), scene_to_bytes(&scene))?;
            entries.push(SceneEntry {
                file,
                seed: seeds[i],
            });
        }
        groups.push(GroupEntry {
            name: group_name.to_string(),
            corruption: None,
            scenes: entries,
        });
    }

    let base_seeds: Vec<u64> = (0..recipe.target_scenes)
        .map(|i| rng::derive_seed_indexed(seed, "target", i as u64))
        .collect();
    for spec in &recipe.ladder {
        let group_name = spec.tag();
        let scenes = parallel::ordered_map(&base_seeds, |_, &s| {
            generate_scene(s, w, h).and_then(|base| corrupt(&base, *spec))
        });
        let mut entries = Vec::with_capacity(base_seeds.len());
        for (i, scene) in scenes.into_iter().enumerate() {
            let scene = scene.map_err(|e| anyhow::anyhow!("{e}"))?;
            let file = format!("{group_name}_{i:05}.bin");
            std::fs::write(scenes_dir.join(&file), scene_to_bytes(&scene))?;
            entries.push(SceneEntry {
                file,
                seed: base_seeds[i],
            });
        }
        groups.push(GroupEntry {
            name: group_name,
            corruption: Some(*spec),
            scenes: entries,
        });
    }

    let manifest = Manifest {
        width: w,
        height: h,
        seed,
        groups,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load every scene of one group.
pub fn load_group(dir: &Path, manifest: &Manifest, name: &str) -> Result<Vec<Scene>> {
    let group = manifest.group(name)?;
    group
        .scenes
        .iter()
        .map(|entry| {
            let path = dir.join("scenes").join(&entry.file);
            let bytes =
                std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            scene_from_bytes(&bytes, entry.seed, group.corruption)
        })
        .collect()
}

/// All corrupted groups concatenated in manifest order, with the id range
/// each group occupies. Scene ids index into the returned vector.
pub fn load_targets(dir: &Path, manifest: &Manifest) -> Result<(Vec<Scene>, Vec<(String, std::ops::Range<usize>)>)> {
    let mut scenes = Vec::new();
    let mut spans = Vec::new();
    for name in manifest.target_group_names() {
        let group = load_group(dir, manifest, &name)?;
        let start = scenes.len();
        scenes.extend(group);
        spans.push((name, start..scenes.len()));
    }
    Ok((scenes, spans))
}

/// Where the dataset writer puts one group's scene files; exposed for
/// tests that compare regenerated bytes.
pub fn scene_path(dir: &Path, entry: &SceneEntry) -> PathBuf {
    dir.join("scenes").join(&entry.file)
}
