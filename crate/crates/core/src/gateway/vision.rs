//! Figure review through the vision role.

use super::{extract_last_json_block, Gateway, GatewayError, Message, ModelRequest, Role};
use crate::prompts::{fill, REVIEW_REPROMPT, VLM_IMAGE_REVIEW};
use crate::review::FigureReview;

/// Parses the review JSON out of a completion; all four text fields must be
/// present and nonempty.
pub fn parse_review(text: &str) -> Result<FigureReview, GatewayError> {
    let value = extract_last_json_block(text)
        .ok_or_else(|| GatewayError::MalformedReview("no JSON block in reply".into()))?;
    let review: FigureReview =
        serde_json::from_value(value).map_err(|e| GatewayError::MalformedReview(e.to_string()))?;
    if !review.is_complete() {
        return Err(GatewayError::MalformedReview("a review field is empty".into()));
    }
    Ok(review)
}

pub(super) fn review_image(
    gateway: &Gateway,
    image: &[u8],
    abstract_text: &str,
    caption: &str,
    figrefs: &[String],
) -> Result<FigureReview, GatewayError> {
    let format = image::guess_format(image).map_err(|e| GatewayError::UndecodableImage(e.to_string()))?;
    image::load_from_memory_with_format(image, format)
        .map_err(|e| GatewayError::UndecodableImage(e.to_string()))?;
    let refs = if figrefs.is_empty() {
        "(none)".to_string()
    } else {
        figrefs.join("\n")
    };
    let prompt = fill(
        VLM_IMAGE_REVIEW,
        &[
            ("abstract", abstract_text),
            ("caption", caption),
            ("main_text_figrefs", &refs),
        ],
    );
    let media_type = format.to_mime_type();
    let mut messages = vec![Message::user(prompt).with_image(media_type, image.to_vec())];
    let first = gateway.complete(&ModelRequest::new(Role::VlmFeedback, messages.clone()))?;
    match parse_review(&first.text) {
        Ok(review) => Ok(review),
        Err(_) => {
            messages.push(Message::assistant(first.text));
            messages.push(Message::user(REVIEW_REPROMPT));
            let second = gateway.complete(&ModelRequest::new(Role::VlmFeedback, messages))?;
            parse_review(&second.text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fenced_review() {
        let text = "THOUGHT:\nfine\n\nREVIEW JSON:\n```json\n{\"Img_description\":\"a\",\"Img_review\":\"b\",\"Caption_review\":\"c\",\"Figrefs_review\":\"d\"}\n```";
        let r = parse_review(text).unwrap();
        assert_eq!(r.caption_review, "c");
        assert!(!r.flagged());
    }

    #[test]
    fn rejects_missing_or_empty_fields() {
        assert!(parse_review("no json here").is_err());
        let empty = "```json\n{\"Img_description\":\"\",\"Img_review\":\"b\",\"Caption_review\":\"c\",\"Figrefs_review\":\"d\"}\n```";
        assert!(matches!(parse_review(empty), Err(GatewayError::MalformedReview(_))));
    }
}
