//! Prompt templates for triplet extraction and description generation.
//!
//! Slots are the input text, entity strings, triplet, relation type or
//! name/description, and the number of requested samples.

/// Header line shared by all triplet-extraction prompts.
pub const OIE_HEADER: &str = "Given a piece of text, two entities subject, object (not ordered) and corresponding relation type between two entities, extract the relation trigger in the form of [Subject, Relation, Object] from it.";

pub const CANDIDATE_HEADER: &str =
    "Define the relationship in a relational triplet extracted from a given text and provide 3 sentence examples of the relationship.";

pub const AUGMENT_HEADER: &str =
    "You are an experienced data scientist working on a relation extraction task.";

const OIE_EXAMPLES: &str = r#"Here are some examples:

Example 1:
Text: "he passed away on saturday ."
Subject, Object entities(not ordered): "he", "saturday"
Complete triplets: ["he", "passed away on", "saturday"]

Example 2:
Text: "as a substantial shareholder in cnac's subsidiary air china, cathay pacific said late monday it would give serious consideration to joining cnac and form a strategic partnership with china eastern."
Subject, Object entities(not ordered): "cnac", "cathay pacific"
Complete triplets: ["cathay pacific", "a substantial shareholder", "cnac"]
"#;

const CANDIDATE_EXAMPLE: &str = r#"Example 1:
Text: "Albert Einstein was born in Germany in 1879."
Triplet: ["Albert Einstein", "was born in", "Germany"]
Relation type: "person place of birth"
Definitions and examples of "was born in":

Sample 1:
{
    "definition": "The relationship between a person and the place where they were born.",
    "examples": [
        "Isaac Newton was born in England in 1643.",
        "Marie Curie was born in Warsaw, Poland.",
        "Leonardo da Vinci was born in Vinci, Italy."
    ]
}
"#;

/// Appended when a triplet completion could not be parsed.
pub const OIE_REPROMPT: &str =
    "Answer with exactly one triplet in the form [\"Subject\", \"Relation\", \"Object\"], using null for the relation if there is none.";

/// Appended when a description completion could not be parsed.
pub const DESCRIPTION_REPROMPT: &str =
    "Answer with each description on its own line, followed by a line \"Examples:\" and one example sentence per line starting with \"- \".";

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

pub fn render_oie_prompt(text: &str, subject: &str, object: &str) -> String {
    format!(
        "{OIE_HEADER} If there is not any relation, relation is null.\n{OIE_EXAMPLES}\nNow it's your turn! Please extract the relation from the following text:\nText: {}\nSubject, Object (not ordered): {}, {}\nComplete triplets:",
        quoted(text),
        quoted(subject),
        quoted(object)
    )
}

pub fn render_candidate_prompt(text: &str, subject: &str, trigger: &str, object: &str, relation_type: &str, k: usize) -> String {
    format!(
        "{CANDIDATE_HEADER}\nYou must generate {k} diverse samples of (relation definition, example) pairs for the relationship.\n\n{CANDIDATE_EXAMPLE}\nNow it's your turn! Please define the relationship in the following relational triplet:\nText: {}\nTriplet: [{}, {}, {}]\nRelation type: {}\nDefinitions and examples of {}:",
        quoted(text),
        quoted(subject),
        quoted(trigger),
        quoted(object),
        quoted(relation_type),
        quoted(trigger)
    )
}

pub fn render_augmentation_prompt(relation: &str, description: &str, k: usize) -> String {
    format!(
        "{AUGMENT_HEADER}\nYour objective is to take a given relation and its brief description and produce a more detailed explanation. Additionally, you should generate three diverse sentence examples demonstrating the relation in use.\nThe relation is: {relation}\nThe description is: {description}\nPlease provide {k} distinct (relation description, examples) pairs.\nYour response:"
    )
}

pub fn with_reprompt(prompt: &str, instruction: &str) -> String {
    format!("{prompt}\n{instruction}")
}
