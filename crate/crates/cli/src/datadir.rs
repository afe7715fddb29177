//! On-disk dataset layout written by `generate` and read by `eval`.
//!
//! ```text
//! <out>/dataset.json
//! <out>/S_d/images/0000.png   <out>/S_d/labels/0000.png
//! <out>/T_d/images/0000.png
//! <out>/T_n/images/0000.png
//! <out>/eval/images/0000.png  <out>/eval/labels/0000.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nightseg::dataset::{World, WorldConfig};
use nightseg::image::{ChannelStats, Image, LabelMap, DEFAULT_IGNORE};
use nightseg::io::{read_label_png, read_rgb_png, write_label_png, write_rgb_png};
use serde::{Deserialize, Serialize};

pub const DATASET_MANIFEST: &str = "dataset.json";
const FORMAT: &str = "nightseg-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub tag: String,
    pub dir: String,
    pub count: usize,
    pub labels: bool,
}

/// Deterministic description of a generated dataset: no timestamps, so
/// the same config always yields the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub num_classes: u8,
    pub ignore_index: u8,
    pub world: WorldConfig,
    /// Aggregate LAB statistics of the training night images.
    pub night_stats: ChannelStats,
    pub domains: Vec<DomainEntry>,
}

fn file_name(i: usize) -> String {
    format!("{i:04}.png")
}

fn write_split(root: &Path, tag: &str, images: &[&Image], labels: Option<&[&LabelMap]>) -> Result<DomainEntry> {
    let img_dir = root.join(tag).join("images");
    fs::create_dir_all(&img_dir)?;
    for (i, img) in images.iter().enumerate() {
        write_rgb_png(img, img_dir.join(file_name(i)))?;
    }
    if let Some(labels) = labels {
        let lab_dir = root.join(tag).join("labels");
        fs::create_dir_all(&lab_dir)?;
        for (i, l) in labels.iter().enumerate() {
            write_label_png(l, lab_dir.join(file_name(i)))?;
        }
    }
    Ok(DomainEntry {
        tag: tag.to_string(),
        dir: tag.to_string(),
        count: images.len(),
        labels: labels.is_some(),
    })
}

pub fn write_dataset(world: &World, cfg: &WorldConfig, root: &Path) -> Result<DatasetManifest> {
    let pool = &world.pool;
    let s_img: Vec<&Image> = pool.source.iter().map(|s| &s.day).collect();
    let s_lab: Vec<&LabelMap> = pool.source.iter().map(|s| &s.label).collect();
    let td: Vec<&Image> = pool.target.iter().map(|t| &t.day).collect();
    let tn: Vec<&Image> = pool.target.iter().map(|t| &t.night).collect();
    let e_img: Vec<&Image> = world.eval.images.iter().collect();
    let e_lab: Vec<&LabelMap> = world.eval.labels.iter().collect();
    let domains = vec![
        write_split(root, "S_d", &s_img, Some(&s_lab))?,
        write_split(root, "T_d", &td, None)?,
        write_split(root, "T_n", &tn, None)?,
        write_split(root, "eval", &e_img, Some(&e_lab))?,
    ];
    let m = DatasetManifest {
        format: FORMAT.to_string(),
        num_classes: cfg.num_classes,
        ignore_index: DEFAULT_IGNORE,
        world: cfg.clone(),
        night_stats: pool.night_stats,
        domains,
    };
    fs::write(root.join(DATASET_MANIFEST), serde_json::to_vec_pretty(&m)?)?;
    Ok(m)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("no dataset manifest at {}", path.display()))?;
    let m: DatasetManifest = serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))?;
    if m.format != FORMAT {
        bail!("unsupported dataset format {:?}", m.format);
    }
    Ok(m)
}

/// PNG files of a directory, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

/// Images and labels of one labelled split, paired by file name.
pub fn read_labelled(root: &Path, tag: &str, m: &DatasetManifest) -> Result<(Vec<Image>, Vec<LabelMap>)> {
    let img_paths = list_pngs(&root.join(tag).join("images"))?;
    if img_paths.is_empty() {
        bail!("split {tag} has no images");
    }
    let mut images = Vec::with_capacity(img_paths.len());
    let mut labels = Vec::with_capacity(img_paths.len());
    for p in img_paths {
        let name = p.file_name().expect("listed file has a name");
        let lp = root.join(tag).join("labels").join(name);
        images.push(read_rgb_png(&p)?);
        labels.push(
            read_label_png(&lp, m.num_classes, m.ignore_index)
                .with_context(|| format!("label for {}", p.display()))?,
        );
    }
    Ok((images, labels))
}
