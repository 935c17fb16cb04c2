//! Prompt templates, reproduced byte-for-byte. Placeholders appear exactly
//! once each and are filled by [`fill`].

pub const TEMPLATE_VERSION: u32 = 1;

pub const STRUCTURED_EXTRACTION: &str = "You are an AI language model that continuously refines its internal experience.
Here is the interaction history (the game environment (input) and your response and action (output)):
{latest_experience}

Here is the previous experience:
# Experience
{previous_experience}

Your task:
Based on the multi-round interaction history, generate experience for future learning. You should conduct a deep, comparative analysis to infer the game rules and the fundamental principles behind winning and losing. Using the interaction history and environment feedback, hypothesize the game rules and effective winning strategies, and organize these insights into 1-2 concise, high-level, and widely applicable experience items that help the player succeed in the game.

Rules:
- The experience you generate MUST be formatted strictly as a markdown item which starts with \"- EXPERIENCE ITEM:\":
- EXPERIENCE ITEM: ...
- EXPERIENCE ITEM: ...
- The experience you generate will be directly appended to the previous experience. Do not repeat the previous experience. Make sure the newly generated experience is different from the previous experience.
- Your generated experience should be possible rules, instructions or winning strategies for the game. The experience should be generally useful rather than only applicable for the current map (board).

After careful reasoning step by step, output the final result in exactly this format:

Additional Experience (Rules or Strategies):
# Experience
- EXPERIENCE ITEM: ...";

pub const UNSTRUCTURED_EXTRACTION: &str = "You are an AI language model that continuously refines its internal experience.
Here is the interaction history (previous experience, the game environment (input) and your response and action (output)):
{latest_experience}

Here is the previous experience:
# Experience
{previous_experience}

Your task:
Based on the multi-round interaction history and the previous experience, generate experience for future learning. You should conduct a deep, comparative analysis to infer the game rules and the fundamental principles behind winning and losing. Using the interaction history and environment feedback, hypothesize the game rules and effective winning strategies, and organize these insights into experience items that help the player succeed in the game.

Rules:
- The experience you generate will be directly appended to the previous experience. Do not repeat the previous experience. Make sure the newly generated experience is different from the previous experience.
- Your generated experience should be possible rules, instructions or winning strategies for the game. The experience should be generally useful rather than only applicable for the current map (board).

After careful reasoning step by step, output the final additional experience.";

pub const SOLVING_WRAPPER: &str = "You are an agent playing a game on a grid, acting as a reasoning engine.

Your decisions are based on the experience you have learned about the game's rules or strategies. This experience is only a guess of how the game works, and the rules and strategies may be incomplete or incorrect.

Given experience for rules or strategies you have learned:
{experience}

Current situation:
{prompt}

What action do you take? (Remember to wrap your final answer of the action in square brackets)";

/// Substitutes each `{key}` once, left to right, so placeholder-like text
/// inside a value is never expanded.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + values.iter().map(|v| v.1.len()).sum::<usize>());
    let mut rest = template;
    for (key, value) in values {
        let placeholder = format!("{{{key}}}");
        let (head, tail) = rest.split_once(&placeholder).expect("template placeholder present");
        out.push_str(head);
        out.push_str(value);
        rest = tail;
    }
    out.push_str(rest);
    out
}

/// Line of the solving wrapper that immediately follows the situation,
/// useful for locating the board inside a wrapped prompt.
pub const SOLVING_QUESTION: &str =
    "What action do you take? (Remember to wrap your final answer of the action in square brackets)";
