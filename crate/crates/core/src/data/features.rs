//! Binary region-feature files.
//!
//! ```text
//! "VFEA" | u32 version | u32 image count | u32 N | u32 D_f
//! per image, N records of: D_f f32 features, 4 f32 box, 1 f32 relevance
//! ```
//! Everything little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::multimodal::{ObjectRegion, VisualSequence, BOX_DIM};

pub const FEATURE_MAGIC: &[u8; 4] = b"VFEA";
pub const FEATURE_VERSION: u32 = 1;

/// Raw contents of a feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub num_regions: usize,
    pub feature_dim: usize,
    pub images: Vec<Vec<ObjectRegion>>,
}

impl FeatureSet {
    /// Validated sequences, checking the file's sizes against `config`.
    pub fn sequences(&self, config: &ModelConfig) -> Result<Vec<VisualSequence>> {
        if self.feature_dim != config.feature_dim || self.num_regions != config.num_regions {
            return Err(Error::Dimension(format!(
                "feature file holds {} regions of {} features, config expects {} of {}",
                self.num_regions, self.feature_dim, config.num_regions, config.feature_dim
            )));
        }
        self.images
            .iter()
            .map(|regions| VisualSequence::new(regions.clone(), self.num_regions, self.feature_dim))
            .collect()
    }
}

pub fn write_features_to<W: Write>(w: &mut W, set: &FeatureSet) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    for v in [
        FEATURE_VERSION,
        set.images.len() as u32,
        set.num_regions as u32,
        set.feature_dim as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for (i, image) in set.images.iter().enumerate() {
        if image.len() != set.num_regions {
            return Err(Error::Dimension(format!(
                "image {i} has {} regions, header says {}",
                image.len(),
                set.num_regions
            )));
        }
        for r in image {
            if r.features.len() != set.feature_dim {
                return Err(Error::Dimension(format!(
                    "image {i} has a region of {} features, header says {}",
                    r.features.len(),
                    set.feature_dim
                )));
            }
            let mut buf = Vec::with_capacity((set.feature_dim + BOX_DIM + 1) * 4);
            for v in r.features.iter().chain(&r.bbox).chain([&r.relevance]) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

pub fn read_features_from<R: Read>(r: &mut R) -> Result<FeatureSet> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!("bad feature file magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!(
            "unsupported feature file version {version}"
        )));
    }
    let count = read_u32(r)? as usize;
    let num_regions = read_u32(r)? as usize;
    let feature_dim = read_u32(r)? as usize;
    let record = feature_dim + BOX_DIM + 1;
    let mut buf = vec![0u8; record * 4];
    let mut images = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let mut regions = Vec::with_capacity(num_regions);
        for _ in 0..num_regions {
            read_exact(r, &mut buf)?;
            let vals: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            regions.push(ObjectRegion {
                features: vals[..feature_dim].to_vec(),
                bbox: [
                    vals[feature_dim],
                    vals[feature_dim + 1],
                    vals[feature_dim + 2],
                    vals[feature_dim + 3],
                ],
                relevance: vals[feature_dim + BOX_DIM],
            });
        }
        images.push(regions);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after the last image".into()));
    }
    Ok(FeatureSet {
        num_regions,
        feature_dim,
        images,
    })
}

pub fn write_features(path: &Path, set: &FeatureSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features_to(&mut w, set)?;
    w.flush()?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<FeatureSet> {
    read_features_from(&mut BufReader::new(File::open(path)?))
}

/// Reads `path` and checks it against `config`.
pub fn read_features(path: &Path, config: &ModelConfig) -> Result<Vec<VisualSequence>> {
    read_feature_file(path)?.sequences(config)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::Truncated("feature file ends mid-record".into())
        }
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
