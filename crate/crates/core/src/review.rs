//! Structured figure reviews produced by the vision model.

use serde::{Deserialize, Serialize};

/// One figure review. The four text fields mirror the review JSON the
/// vision prompt asks for; `issues` lists concrete problems and is empty
/// when the figure is acceptable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FigureReview {
    #[serde(rename = "Img_description")]
    pub img_description: String,
    #[serde(rename = "Img_review")]
    pub img_review: String,
    #[serde(rename = "Caption_review")]
    pub caption_review: String,
    #[serde(rename = "Figrefs_review")]
    pub figrefs_review: String,
    #[serde(rename = "Issues", default)]
    pub issues: Vec<String>,
}

impl FigureReview {
    pub fn is_complete(&self) -> bool {
        [
            &self.img_description,
            &self.img_review,
            &self.caption_review,
            &self.figrefs_review,
        ]
        .iter()
        .all(|f| !f.trim().is_empty())
    }

    pub fn flagged(&self) -> bool {
        self.issues.iter().any(|i| !i.trim().is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FigureVerdict {
    pub path: String,
    pub review: FigureReview,
}

/// Outcome of the figure gate, stored on the node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmFeedback {
    pub passed: bool,
    pub summary: String,
    pub figures: Vec<FigureVerdict>,
}
