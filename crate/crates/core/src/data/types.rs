use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Standard echocardiographic probe positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViewId {
    /// Parasternal left ventricle long axis.
    #[serde(rename = "PLVLA")]
    Plvla,
    /// Left ventricular short axis.
    #[serde(rename = "LVSA")]
    Lvsa,
    /// Apical four chamber.
    #[serde(rename = "A4C")]
    A4c,
}

impl ViewId {
    pub const ALL: [ViewId; 3] = [ViewId::Plvla, ViewId::Lvsa, ViewId::A4c];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewId::Plvla => "PLVLA",
            ViewId::Lvsa => "LVSA",
            ViewId::A4c => "A4C",
        }
    }

    /// Chambers visible in this view, in channel order.
    pub fn standard_classes(self) -> Vec<Chamber> {
        match self {
            ViewId::Plvla | ViewId::Lvsa => vec![Chamber::Lv, Chamber::Rv],
            ViewId::A4c => vec![Chamber::Lv, Chamber::La, Chamber::Ra, Chamber::Rv],
        }
    }
}

impl fmt::Display for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewId {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ViewId::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| DataError::Lookup(format!("unknown view `{s}`")))
    }
}

/// Segmentation classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Chamber {
    #[serde(rename = "LV")]
    Lv,
    #[serde(rename = "RV")]
    Rv,
    #[serde(rename = "LA")]
    La,
    #[serde(rename = "RA")]
    Ra,
}

impl Chamber {
    pub fn as_str(self) -> &'static str {
        match self {
            Chamber::Lv => "LV",
            Chamber::Rv => "RV",
            Chamber::La => "LA",
            Chamber::Ra => "RA",
        }
    }

    /// Overlay colour (red, green, blue, cyan for LV, RV, LA, RA).
    pub fn colour(self) -> [u8; 3] {
        match self {
            Chamber::Lv => [230, 30, 30],
            Chamber::Rv => [30, 200, 30],
            Chamber::La => [40, 60, 240],
            Chamber::Ra => [0, 220, 220],
        }
    }
}

impl fmt::Display for Chamber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A view together with the structures annotated in it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub view_id: ViewId,
    pub class_set: Vec<Chamber>,
}

impl ViewSpec {
    pub fn standard(view_id: ViewId) -> Self {
        Self { view_id, class_set: view_id.standard_classes() }
    }

    /// The PLVLA, LVSA, A4C roster.
    pub fn standard_roster() -> Vec<ViewSpec> {
        ViewId::ALL.into_iter().map(Self::standard).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_set.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.class_set.is_empty() {
            return Err(DataError::Schema(format!("view {} has an empty class set", self.view_id)));
        }
        let mut seen = self.class_set.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.class_set.len() {
            return Err(DataError::Schema(format!("view {} lists a class twice", self.view_id)));
        }
        Ok(())
    }
}

/// Checks a roster has distinct, valid views.
pub fn validate_roster(views: &[ViewSpec]) -> Result<(), DataError> {
    for v in views {
        v.validate()?;
    }
    for (i, a) in views.iter().enumerate() {
        if views[i + 1..].iter().any(|b| b.view_id == a.view_id) {
            return Err(DataError::Schema(format!("view {} appears twice in the roster", a.view_id)));
        }
    }
    Ok(())
}

/// An 8-bit grayscale frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        if pixels.len() != height * width {
            return Err(DataError::Schema(format!(
                "frame of {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Intensities scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }
}

/// A binary segmentation mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, DataError> {
        if bits.len() != height * width {
            return Err(DataError::Schema(format!(
                "mask of {height}x{width} needs {} pixels, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Mean pixel position `(y, x)` of the foreground, if any.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    sy += y as f64;
                    sx += x as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sy / n as f64, sx / n as f64))
    }
}

/// Masks of one annotated frame, one per class of the view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotation {
    pub frame_index: usize,
    pub masks: Vec<BinaryMask>,
}
