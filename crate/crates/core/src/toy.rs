//! Small synthetic code/comment corpora for smoke tests and demos.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::DatasetRecord;

const NOUNS: [&str; 10] = [
    "file", "name", "path", "size", "user", "node", "token", "cache", "frame", "query",
];

const TYPES: [&str; 4] = ["int", "String", "long", "Object"];

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    chars
        .next()
        .map(|c| c.to_ascii_uppercase().to_string() + chars.as_str())
        .unwrap_or_default()
}

fn pair(template: usize, noun: &str, ty: &str) -> DatasetRecord {
    let cap = capitalize(noun);
    let (code, comment, language) = match template {
        0 => (
            format!("public {ty} get{cap}() {{\n    return this.{noun};\n}}"),
            format!("get the {noun} ."),
            "java",
        ),
        1 => (
            format!("public void set{cap}({ty} {noun}) {{\n    this.{noun} = {noun};\n}}"),
            format!("set the {noun} ."),
            "java",
        ),
        2 => (
            format!("public boolean has{cap}() {{\n    return {noun} != null;\n}}"),
            format!("check whether the {noun} is set ."),
            "java",
        ),
        3 => (
            format!("public {cap}Reader create{cap}Reader() {{\n    return new {cap}Reader();\n}}"),
            format!("create {noun}reader ."),
            "java",
        ),
        _ => (
            format!("def load_{noun}(self):\n    return self._{noun}"),
            format!("load the {noun} from disk ."),
            "python",
        ),
    };
    DatasetRecord {
        code,
        comment,
        language: language.into(),
        origin: "toy".into(),
    }
}

/// Number of distinct pairs [`accessor_pairs`] can produce.
pub const MAX_ACCESSOR_PAIRS: usize = 5 * NOUNS.len();

/// Up to [`MAX_ACCESSOR_PAIRS`] distinct getter/setter/factory/loader pairs
/// whose comments restate the identifier in the code, in seeded order.
/// Factory comments use compound words such as `filereader`, which a
/// vocabulary built from these comments can only spell.
pub fn accessor_pairs(n: usize, seed: u64) -> Vec<DatasetRecord> {
    assert!(n <= MAX_ACCESSOR_PAIRS, "at most {MAX_ACCESSOR_PAIRS} pairs");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos: Vec<(usize, &str)> = (0..5)
        .flat_map(|t| NOUNS.iter().map(move |&noun| (t, noun)))
        .collect();
    combos.shuffle(&mut rng);
    combos
        .into_iter()
        .take(n)
        .map(|(t, noun)| {
            let ty = *TYPES.choose(&mut rng).expect("non-empty");
            pair(t, noun, ty)
        })
        .collect()
}
