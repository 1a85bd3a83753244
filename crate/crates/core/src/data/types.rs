use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One detected object: RoI feature, normalized box `[x1, y1, x2, y2]`, label word and confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionFeature {
    pub feat: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub label: String,
    pub score: f64,
}

impl RegionFeature {
    /// Checks box geometry, score range and (optionally) feature length.
    pub fn validate(&self, d_o: Option<usize>) -> Result<()> {
        if let Some(d) = d_o {
            if self.feat.len() != d {
                return Err(Error::dim("region feature", &[self.feat.len()], &[d]));
            }
        }
        let [x1, y1, x2, y2] = self.bbox;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(x1) && unit(y1) && unit(x2) && unit(y2) && x1 < x2 && y1 < y2) {
            return Err(Error::input(format!("box {:?} is not a normalized box", self.bbox)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::input(format!("region score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }
}

/// One meme: OCR text, binary label, detected regions and an optional generated caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemeSample {
    pub id: String,
    pub text: String,
    pub label: u8,
    pub regions: Vec<RegionFeature>,
    #[serde(default)]
    pub caption: Option<String>,
}

impl MemeSample {
    pub fn is_hateful(&self) -> bool {
        self.label == 1
    }
}

/// An image in the caption corpus with its reference captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionSample {
    pub id: String,
    pub regions: Vec<RegionFeature>,
    pub references: Vec<String>,
}

/// Planted ground truth for a generated meme.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub id: String,
    pub text_indicator: bool,
    pub visual_indicator: bool,
    pub noise_flipped: bool,
    /// Concepts actually depicted (may differ from region labels in caption-only worlds).
    pub concepts: Vec<String>,
    /// Canonical description of the depicted concepts.
    pub reference_caption: String,
}
