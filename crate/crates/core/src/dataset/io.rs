//! On-disk layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/readings/<id>/image.pgm
//! <root>/readings/<id>/annotations.json
//! <root>/readings/<id>/gaze.csv | fixations.csv
//! ```
//!
//! `fixations.csv` wins when both gaze files are present. The manifest is
//! written last so its presence marks a complete dataset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EllipseAnnotation, GrayImage, Reading, SplitTag, SynthConfig};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::gaze::{self, GazeData};

pub fn load_reading(dir: &Path) -> Result<Reading> {
    let id = dir
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("bad reading directory {}", dir.display())))?
        .to_string();

    let img_path = dir.join("image.pgm");
    let (w, h, px) = fsutil::decode_pgm(&img_path, &fsutil::read_bytes(&img_path)?)?;
    let image = GrayImage::from_u8(w, h, &px)?;

    let ann_path = dir.join("annotations.json");
    let annotations: Vec<EllipseAnnotation> = fsutil::read_json(&ann_path)?;

    let fix_path = dir.join("fixations.csv");
    let gaze_path = dir.join("gaze.csv");
    let gaze = if fix_path.exists() {
        GazeData::Fixations(gaze::read_fixations_csv(&fix_path)?)
    } else if gaze_path.exists() {
        GazeData::Raw(gaze::read_gaze_csv(&gaze_path)?)
    } else {
        return Err(Error::io(
            &gaze_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "neither gaze.csv nor fixations.csv present"),
        ));
    };
    Ok(Reading {
        id,
        image,
        gaze,
        annotations,
    })
}

pub fn write_reading(dir: &Path, reading: &Reading) -> Result<()> {
    let img = &reading.image;
    fsutil::write_atomic(
        &dir.join("image.pgm"),
        &fsutil::encode_pgm(img.width, img.height, &img.to_u8()),
    )?;
    fsutil::write_json(&dir.join("annotations.json"), &reading.annotations)?;
    match &reading.gaze {
        GazeData::Raw(s) => fsutil::write_atomic(&dir.join("gaze.csv"), gaze::gaze_to_csv(s).as_bytes()),
        GazeData::Fixations(f) => {
            fsutil::write_atomic(&dir.join("fixations.csv"), gaze::fixations_to_csv(f).as_bytes())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: SplitTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub readings: Vec<ManifestEntry>,
    /// Present when the dataset was generated synthetically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthProvenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthProvenance {
    pub config: SynthConfig,
    pub seed: u64,
}

impl Manifest {
    pub fn with_synth(mut self, config: SynthConfig, seed: u64) -> Self {
        self.synth = Some(SynthProvenance { config, seed });
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub readings: Vec<Reading>,
}

impl Dataset {
    pub fn part(&self, tag: SplitTag) -> Vec<Reading> {
        self.manifest
            .readings
            .iter()
            .zip(&self.readings)
            .filter(|(e, _)| e.split == tag)
            .map(|(_, r)| r.clone())
            .collect()
    }
}

pub fn write_dataset(root: &Path, readings: &[Reading], manifest: &Manifest) -> Result<()> {
    if manifest.readings.len() != readings.len()
        || manifest.readings.iter().zip(readings).any(|(e, r)| e.id != r.id)
    {
        return Err(Error::invalid("manifest does not list the readings in order"));
    }
    for r in readings {
        write_reading(&root.join("readings").join(&r.id), r)?;
    }
    fsutil::write_json(&root.join("manifest.json"), manifest)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest: Manifest = fsutil::read_json(&root.join("manifest.json"))?;
    let readings = manifest
        .readings
        .iter()
        .map(|e| load_reading(&root.join("readings").join(&e.id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        readings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClassLabel;
    use crate::gaze::{Fixation, GazeSample};

    fn sample_reading() -> Reading {
        Reading {
            id: "r1".into(),
            image: GrayImage::from_u8(4, 3, &[0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 255]).unwrap(),
            gaze: GazeData::Raw(vec![GazeSample::at(0.0, 1.0, 1.0), GazeSample::at(16.0, 1.5, 1.0)]),
            annotations: vec![EllipseAnnotation {
                cx: 2.0,
                cy: 1.5,
                rx: 1.0,
                ry: 0.5,
                label: ClassLabel::PleuralAbnormality,
            }],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_reading();
        write_reading(&dir.path().join("r1"), &r).unwrap();
        assert_eq!(load_reading(&dir.path().join("r1")).unwrap(), r);
    }

    #[test]
    fn empty_annotation_list_is_legal() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = sample_reading();
        r.annotations.clear();
        write_reading(&dir.path().join("r1"), &r).unwrap();
        assert_eq!(
            std::fs::read_to_string(dir.path().join("r1/annotations.json")).unwrap().trim(),
            "[]"
        );
        assert!(load_reading(&dir.path().join("r1")).unwrap().annotations.is_empty());
    }

    #[test]
    fn fixations_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("r1");
        let mut r = sample_reading();
        write_reading(&d, &r).unwrap();
        let f = vec![Fixation {
            cx_px: 1.0,
            cy_px: 2.0,
            start_ms: 0.0,
            end_ms: 120.0,
            n_samples: 0,
        }];
        std::fs::write(d.join("fixations.csv"), gaze::fixations_to_csv(&f)).unwrap();
        r.gaze = GazeData::Fixations(f);
        assert_eq!(load_reading(&d).unwrap(), r);
    }

    #[test]
    fn errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("r1");
        write_reading(&d, &sample_reading()).unwrap();

        std::fs::write(
            d.join("gaze.csv"),
            "t_ms,x_px,y_px,pupil_mm,valid\n10,1,1,,1\n5,1,1,,1\n",
        )
        .unwrap();
        let msg = load_reading(&d).unwrap_err().to_string();
        assert!(msg.contains("gaze.csv:3"), "{msg}");

        std::fs::write(
            d.join("annotations.json"),
            "[\n{\"cx\":1,\"cy\":1,\"rx\":1,\"ry\":1,\"label\":\"fracture\"}\n]",
        )
        .unwrap();
        let msg = load_reading(&d).unwrap_err().to_string();
        assert!(msg.contains("annotations.json") && msg.contains("line 2"), "{msg}");

        std::fs::remove_file(d.join("image.pgm")).unwrap();
        assert!(load_reading(&d).unwrap_err().to_string().contains("image.pgm"));
    }

    #[test]
    fn missing_gaze_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("r1");
        write_reading(&d, &sample_reading()).unwrap();
        std::fs::remove_file(d.join("gaze.csv")).unwrap();
        assert!(load_reading(&d).is_err());
    }
}
