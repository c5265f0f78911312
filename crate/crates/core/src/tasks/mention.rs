use std::collections::BTreeMap;
use std::path::Path;

use super::TaskError;

/// Extra surface forms per category name, e.g. `person = ["man", "woman"]`.
pub type Synonyms = BTreeMap<String, Vec<String>>;

pub fn load_synonyms(path: impl AsRef<Path>) -> Result<Synonyms, TaskError> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| TaskError::Config(format!("synonym file: {e}")))
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn contains_phrase(tokens: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && tokens.windows(phrase.len()).any(|w| w == phrase)
}

/// Whether any caption mentions the category: its tokens in sequence, the
/// naive plurals (+s, +es) of its last token, or a configured synonym.
pub fn caption_mentions(category: &str, captions: &[String], synonyms: Option<&Synonyms>) -> bool {
    let base = tokenize(category);
    if base.is_empty() {
        return false;
    }
    let mut phrases = vec![base.clone()];
    for suffix in ["s", "es"] {
        let mut plural = base.clone();
        if let Some(last) = plural.last_mut() {
            last.push_str(suffix);
        }
        phrases.push(plural);
    }
    if let Some(extra) = synonyms.and_then(|s| s.get(category)) {
        phrases.extend(extra.iter().map(|s| tokenize(s)));
    }
    captions.iter().any(|caption| {
        let tokens = tokenize(caption);
        phrases.iter().any(|p| contains_phrase(&tokens, p))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn caps(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn exact_and_plural() {
        assert!(caption_mentions("dog", &caps(&["a dog on a couch"]), None));
        assert!(caption_mentions("dog", &caps(&["two dogs playing"]), None));
        assert!(caption_mentions("bus", &caps(&["three buses parked"]), None));
    }

    #[test]
    fn token_boundary_not_substring() {
        assert!(!caption_mentions("cat", &caps(&["a catalog on the table"]), None));
        assert!("a catalog on the table".contains("cat"));
    }

    #[test]
    fn multiword_and_punctuation() {
        assert!(caption_mentions(
            "traffic light",
            &caps(&["The Traffic-Light, red."]),
            None
        ));
        assert!(caption_mentions("hot dog", &caps(&["two hot dogs"]), None));
        assert!(!caption_mentions("hot dog", &caps(&["a hot day for a dog"]), None));
    }

    #[test]
    fn synonyms_extend_matches() {
        let mut syn = Synonyms::new();
        syn.insert("person".into(), vec!["man".into(), "young woman".into()]);
        assert!(caption_mentions("person", &caps(&["a man rides"]), Some(&syn)));
        assert!(caption_mentions("person", &caps(&["A young woman."]), Some(&syn)));
        assert!(!caption_mentions("person", &caps(&["a woman"]), Some(&syn)));
    }

    #[test]
    fn no_captions() {
        assert!(!caption_mentions("dog", &[], None));
    }
}
