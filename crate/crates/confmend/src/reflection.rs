//! The self-correction prompt.
//!
//! The template is a versioned byte-exact resource: interrupted paths are
//! shown their original question and their partial reasoning between `---`
//! fences, and asked to diagnose and correct the final steps. Placeholders
//! are substituted literally — a partial path that itself contains `---`
//! or a placeholder string is emitted unescaped (documented limitation).

use crate::error::{Error, Result};

/// The versioned prompt template. `{original_prompt}` and `{partial_path}`
/// are replaced verbatim.
pub const TEMPLATE: &str = include_str!("../resources/reflection_prompt_v1.txt");

/// Template version identifier recorded in archives.
pub const TEMPLATE_VERSION: &str = "reflection_prompt_v1";

/// Distinctive substring of the template's interruption notice. Scripted
/// backends dispatch on it to serve their correction branch, and tests use
/// it to recognise reflection requests.
pub const INTERRUPTION_MARKER: &str = "My reasoning process was interrupted";

const ORIGINAL_PROMPT_SLOT: &str = "{original_prompt}";
const PARTIAL_PATH_SLOT: &str = "{partial_path}";

/// Render the reflection prompt for a partial reasoning path.
///
/// `original_prompt` is the prompt the interrupted generation was started
/// from; `partial_path` is the decoded text generated so far, up to and
/// including the trigger step. An empty partial path is a precondition
/// violation: there is nothing to reflect on.
pub fn render(original_prompt: &str, partial_path: &str) -> Result<String> {
    if partial_path.is_empty() {
        return Err(Error::EmptyTrajectory(
            "reflection requires a non-empty partial path".into(),
        ));
    }
    Ok(TEMPLATE
        .replace(ORIGINAL_PROMPT_SLOT, original_prompt)
        .replace(PARTIAL_PATH_SLOT, partial_path))
}
