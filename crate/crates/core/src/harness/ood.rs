//! A fixed instruction-following micro-suite over the shared vocabulary,
//! unrelated to either game. Accuracy before and after consolidation
//! measures how much unrelated ability a training run erodes.

use crate::chat::Chat;
use crate::policy::ToyModel;

/// `(instruction, exact answer)` pairs.
pub const OOD_SUITE: [(&str, &str); 20] = [
    ("Write the bracketed action for the key w.", "[up]"),
    ("Write the bracketed action for the key a.", "[left]"),
    ("Write the bracketed action for the key s.", "[down]"),
    ("Write the bracketed action for the key d.", "[right]"),
    ("Write the opposite of [up] in brackets.", "[down]"),
    ("Write the opposite of [down] in brackets.", "[up]"),
    ("Write the opposite of [left] in brackets.", "[right]"),
    ("Write the opposite of [right] in brackets.", "[left]"),
    ("Repeat the word: think", "think"),
    ("Repeat the word: path", "path"),
    ("Repeat the word: clear", "clear"),
    ("Repeat the word: fine", "fine"),
    ("Which letter marks a hole?", "H"),
    ("Which letter marks the goal?", "G"),
    ("Which letter marks the player?", "P"),
    ("Which letter marks a box?", "X"),
    ("Which symbol marks a wall?", "#"),
    ("Which letter marks a target?", "O"),
    ("Count the letters in the word up.", "2"),
    ("Count the letters in the word down.", "4"),
];

/// Fraction of suite items answered exactly under greedy decoding.
pub fn ood_accuracy(model: &ToyModel) -> f64 {
    let vocab = model.vocab_arc();
    let correct = OOD_SUITE
        .iter()
        .filter(|(prompt, answer)| {
            let ctx = vocab.encode(&Chat::single_user(*prompt).generation_prompt());
            let out = model.greedy(&ctx, 8);
            let mut expected = vocab.encode(answer);
            expected.push(vocab.end_id());
            out == expected
        })
        .count();
    correct as f64 / OOD_SUITE.len() as f64
}
