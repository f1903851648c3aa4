//! Caption construction: the VLM instruction prompt, the fixed caption for
//! untouched frames, and the deterministic offline template captioner.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::dataset::UNTOUCHED_CAPTION;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CaptionError {
    #[error("object name must not be empty")]
    EmptyObjectName,
    #[error("caption attribute `{0}` is missing")]
    MissingAttribute(&'static str),
}

/// Description factors every prompt asks the model to cover.
pub const PROMPT_FACTORS: [&str; 4] = [
    "name of the touched object",
    "contact location",
    "material composition",
    "texture characteristics and softness/hardness",
];

/// Instruction template; `{object}` is substituted verbatim.
pub const PROMPT_TEMPLATE: &str = "The red box in this image marks the spot where a tactile sensor is touching a {object}. \
Write one or two sentences describing the touch. Cover the name of the touched object ({object}), \
the contact location on the object, the material composition at the point of contact, \
and the texture characteristics and softness/hardness of the touched area. \
Describe only what is inside the red box and answer with the description alone.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub object_name: String,
    pub template: String,
}

impl PromptSpec {
    pub fn new(object_name: &str) -> Result<Self, CaptionError> {
        if object_name.trim().is_empty() {
            return Err(CaptionError::EmptyObjectName);
        }
        Ok(Self {
            object_name: object_name.trim().to_string(),
            template: PROMPT_TEMPLATE.to_string(),
        })
    }

    pub fn render(&self) -> String {
        self.template.replace("{object}", &self.object_name)
    }
}

pub fn build_prompt(object_name: &str) -> Result<String, CaptionError> {
    PromptSpec::new(object_name).map(|p| p.render())
}

pub fn caption_untouched() -> &'static str {
    UNTOUCHED_CAPTION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Vlm,
    Template,
    FixedUntouched,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub record_id: String,
    pub caption: String,
    pub provenance: Provenance,
    pub model: Option<String>,
}

/// Inputs of the offline captioner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionAttributes {
    pub object_name: String,
    pub location: String,
    pub material: String,
    pub texture: String,
    pub hardness: String,
}

/// `"The {location} of the {object} is made of {material}; it feels {texture} and {hardness}."`
pub fn template_caption(attrs: &CaptionAttributes) -> Result<String, CaptionError> {
    let fields = [
        ("object_name", &attrs.object_name),
        ("location", &attrs.location),
        ("material", &attrs.material),
        ("texture", &attrs.texture),
        ("hardness", &attrs.hardness),
    ];
    for (name, value) in fields {
        if value.trim().is_empty() {
            return Err(CaptionError::MissingAttribute(name));
        }
    }
    Ok(format!(
        "The {} of the {} is made of {}; it feels {} and {}.",
        attrs.location.trim(),
        attrs.object_name.trim(),
        attrs.material.trim(),
        attrs.texture.trim(),
        attrs.hardness.trim()
    ))
}

/// Whitespace cleanup applied to model responses so each caption stays on
/// one manifest line.
pub fn normalize_response(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attrs(material: &str) -> CaptionAttributes {
        CaptionAttributes {
            object_name: "ball".into(),
            location: "top surface".into(),
            material: material.into(),
            texture: "smooth".into(),
            hardness: "soft".into(),
        }
    }

    #[test]
    fn prompt_covers_every_factor() {
        for name in ["ball", "mug handle"] {
            let p = build_prompt(name).unwrap();
            assert!(p.contains(name));
            for factor in PROMPT_FACTORS {
                assert!(p.contains(factor), "{factor} missing");
            }
        }
        assert_eq!(build_prompt("ball").unwrap(), build_prompt("ball").unwrap());
        assert_eq!(build_prompt("  "), Err(CaptionError::EmptyObjectName));
    }

    #[test]
    fn untouched_caption_is_constant() {
        assert_eq!(caption_untouched(), "No object is being touched.");
        assert_eq!(caption_untouched().len(), caption_untouched().len());
    }

    #[test]
    fn template_sentence() {
        assert_eq!(
            template_caption(&attrs("rubber")).unwrap(),
            "The top surface of the ball is made of rubber; it feels smooth and soft."
        );
        assert_ne!(
            template_caption(&attrs("rubber")).unwrap(),
            template_caption(&attrs("metal")).unwrap()
        );
        assert_eq!(
            template_caption(&attrs("")),
            Err(CaptionError::MissingAttribute("material"))
        );
    }

    #[test]
    fn response_normalization() {
        assert_eq!(
            normalize_response("  A soft\nrubber ball.\r\n\n Smooth. "),
            "A soft rubber ball. Smooth."
        );
    }
}
