//! Reading format, ellipse-to-target conversion, synthetic data and splits.
//!
//! One reading is one radiologist's session over one image: the grayscale
//! image, the gaze recording (raw or as fixations) and zero or more
//! abnormality ellipses.

mod io;
mod split;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::{render_heatmap, FixationMap, FixationParams, GazeData, Weighting};
use crate::geometry::BBox;

pub use io::{load_dataset, load_reading, write_dataset, write_reading, Dataset, Manifest, ManifestEntry};
pub use split::{split, Split, SplitTag};
pub use synth::{synth_generate, ClassPrior, SynthConfig};

/// The five abnormality classes, with stable ids 0..=4 in declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    EnlargedCardiacSilhouette,
    Atelectasis,
    PleuralAbnormality,
    Consolidation,
    PulmonaryEdema,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 5] = [
        ClassLabel::EnlargedCardiacSilhouette,
        ClassLabel::Atelectasis,
        ClassLabel::PleuralAbnormality,
        ClassLabel::Consolidation,
        ClassLabel::PulmonaryEdema,
    ];
    pub const COUNT: usize = 5;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("class id {id} out of range 0..5")))
    }

    pub fn key(self) -> &'static str {
        match self {
            ClassLabel::EnlargedCardiacSilhouette => "enlarged_cardiac_silhouette",
            ClassLabel::Atelectasis => "atelectasis",
            ClassLabel::PleuralAbnormality => "pleural_abnormality",
            ClassLabel::Consolidation => "consolidation",
            ClassLabel::PulmonaryEdema => "pulmonary_edema",
        }
    }

    pub fn from_key(key: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.key() == key)
            .ok_or_else(|| Error::invalid(format!("unknown class `{key}`")))
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ClassLabel::EnlargedCardiacSilhouette => "Enlarged cardiac silhouette",
            ClassLabel::Atelectasis => "Atelectasis",
            ClassLabel::PleuralAbnormality => "Pleural abnormality",
            ClassLabel::Consolidation => "Consolidation",
            ClassLabel::PulmonaryEdema => "Pulmonary edema",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Axis-aligned ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEllipse")]
pub struct EllipseAnnotation {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub label: ClassLabel,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEllipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    label: ClassLabel,
}

impl TryFrom<RawEllipse> for EllipseAnnotation {
    type Error = String;

    fn try_from(r: RawEllipse) -> Result<Self, String> {
        let e = EllipseAnnotation {
            cx: r.cx,
            cy: r.cy,
            rx: r.rx,
            ry: r.ry,
            label: r.label,
        };
        e.validate().map_err(|e| e.to_string())?;
        Ok(e)
    }
}

impl EllipseAnnotation {
    pub fn validate(&self) -> Result<()> {
        if ![self.cx, self.cy, self.rx, self.ry].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("ellipse has non-finite geometry"));
        }
        if !(self.rx > 0.0 && self.ry > 0.0) {
            return Err(Error::invalid(format!(
                "ellipse radii must be positive, got rx={} ry={}",
                self.rx, self.ry
            )));
        }
        Ok(())
    }

    /// Pixel-centre rule: pixel (x, y) is inside when its centre satisfies the
    /// ellipse inequality.
    pub fn covers_pixel(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.cx - self.rx, self.cy - self.ry, self.cx + self.rx, self.cy + self.ry)
    }
}

/// Binary grid at image resolution, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Training target derived from one ellipse.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBox {
    pub bbox: BBox,
    pub label: ClassLabel,
    pub mask: BinaryMask,
}

/// Box = the ellipse's axis-aligned extent clamped to the image; mask = the
/// pixels whose centres fall inside the ellipse.
pub fn ellipse_to_target(e: &EllipseAnnotation, img_w: usize, img_h: usize) -> Result<TargetBox> {
    e.validate()?;
    let bbox = e.bbox().clip(img_w as f64, img_h as f64);
    if !bbox.is_valid() {
        return Err(Error::invalid(format!(
            "ellipse at ({}, {}) lies entirely outside the {img_w}x{img_h} image",
            e.cx, e.cy
        )));
    }
    let mut data = vec![0u8; img_w * img_h];
    let x0 = bbox.x_min.floor() as usize;
    let y0 = bbox.y_min.floor() as usize;
    let x1 = (bbox.x_max.ceil() as usize).min(img_w);
    let y1 = (bbox.y_max.ceil() as usize).min(img_h);
    for y in y0..y1 {
        for x in x0..x1 {
            if e.covers_pixel(x, y) {
                data[y * img_w + x] = 1;
            }
        }
    }
    Ok(TargetBox {
        bbox,
        label: e.label,
        mask: BinaryMask {
            width: img_w,
            height: img_h,
            data,
        },
    })
}

/// Grayscale image with values in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::invalid(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_u8(width: usize, height: usize, px: &[u8]) -> Result<Self> {
        Self::new(width, height, px.iter().map(|&p| p as f64 / 255.0).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| crate::fsutil::to_u8(v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reading {
    pub id: String,
    pub image: GrayImage,
    pub gaze: GazeData,
    pub annotations: Vec<EllipseAnnotation>,
}

impl Reading {
    pub fn targets(&self) -> Result<Vec<TargetBox>> {
        self.annotations
            .iter()
            .map(|e| ellipse_to_target(e, self.image.width, self.image.height))
            .collect()
    }

    /// Fixation map for this reading with the default thresholds and kernel
    /// scaled to the image width.
    pub fn fixation_map(&self) -> Result<FixationMap> {
        let (w, h) = (self.image.width, self.image.height);
        let fixations = self.gaze.fixations(w, h, &FixationParams::for_width(w))?;
        render_heatmap(
            &fixations,
            w,
            h,
            crate::gaze::scaled_to_width(crate::gaze::DEFAULT_SIGMA_PX, w),
            Weighting::Duration,
        )
    }
}
