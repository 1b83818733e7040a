//! Deterministic prompt construction for primitive extraction.

use crate::error::{Result, TessError};
use crate::primitives::PrimitiveKind;

/// Inputs substituted into the extraction prompt.
#[derive(Debug, Clone)]
pub struct PromptSpec {
    pub role_description: String,
    pub domain_context: String,
    pub text_content: String,
}

const TEMPLATE: &str = r#"You are a professional {role}.
Your task is to analyze the provided textual information and
infer temporal evolution patterns that may impact future time series behavior.

Textual Input: {text_content}
Domain Context: {domain_context}

Instructions:
Based on the textual content provided below, analyze and classify
the following four temporal evolution primitives:

1. Mean Shift - Infer the direction and magnitude of anticipated
   level changes:
   <strong-rise | mild-rise | stable | mild-drop | strong-drop>

2. Volatility - Infer the anticipated changes in volatility regime:
   <surge | rise | stable | fall | calm>

3. Shape - Infer the dominant trend morphology pattern over the
   forecast horizon:
   <ascend | descend | peak | trough | oscillate>

4. Lag and Decay - Infer the temporal localization and persistence
   of the impact:
   <early-fade | early-persist | mid-fade | mid-persist | late | diffuse>

You MUST output in the following EXACT format with no extra text:

Mean Shift: <strong-rise | mild-rise | stable | mild-drop | strong-drop>
Volatility: <surge | rise | stable | fall | calm>
Shape: <ascend | descend | peak | trough | oscillate>
Lag: <early-fade | early-persist | mid-fade | mid-persist | late | diffuse>

Provide your analysis in the exact format specified above.
"#;

/// Render the extraction prompt. Byte-identical for equal inputs.
pub fn build_prompt(spec: &PromptSpec) -> Result<String> {
    if spec.text_content.trim().is_empty() {
        return Err(TessError::Prompt("empty text content".into()));
    }
    if spec.role_description.trim().is_empty() || spec.domain_context.trim().is_empty() {
        return Err(TessError::Prompt(
            "role description and domain context must be non-empty".into(),
        ));
    }
    Ok(TEMPLATE
        .replace("{role}", &spec.role_description)
        .replace("{text_content}", &spec.text_content)
        .replace("{domain_context}", &spec.domain_context))
}

/// Context string for continuation scoring of `kind`: the full prompt plus
/// that primitive's output-line prefix. Candidate label strings are scored as
/// continuations of this context.
pub fn scoring_context(prompt: &str, kind: PrimitiveKind) -> String {
    format!("{prompt}\n{}: ", kind.line_key())
}
