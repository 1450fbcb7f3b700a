//! Layout of a single training sample: the problem text wrapped in triple
//! quotes, then the signature, with the extracted code as the target.

use crate::datamodel::{ProgrammingProblem, ResponseTokens};
use crate::tokenizer::response_tokens;

/// The conditioning text for a problem. Identical to the PanGu2 inference
/// prompt when a signature is present.
pub fn training_prompt(problem: &ProgrammingProblem) -> String {
    format!("\"\"\"\n{}\n\"\"\"\n{}", problem.instruction, problem.signature.trim())
}

/// The part of `code` that continues the prompt: a leading copy of the
/// signature line is dropped, since the prompt already ends with it.
pub fn completion_target(signature: &str, code: &str) -> String {
    let sig = signature.trim();
    if sig.is_empty() {
        return code.to_string();
    }
    let trimmed = code.trim_start();
    match trimmed.strip_prefix(sig) {
        Some(rest) => rest.to_string(),
        None => code.to_string(),
    }
}

pub fn encode_response(signature: &str, code: &str) -> ResponseTokens {
    let text = completion_target(signature, code);
    ResponseTokens {
        tokens: response_tokens(&text).0,
        text,
    }
}
