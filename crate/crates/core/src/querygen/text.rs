//! Tokenizer, vocabulary and prompt templates.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;

use super::{QueryError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on anything that is not alphanumeric.
pub fn normalize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Word-level vocabulary. Id 0 is padding, id 1 stands for unknown words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary over every word occurring in `texts`, sorted.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(normalize).collect();
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(words);
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Parses one token per line, as written by [`Vocabulary::to_text`].
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(QueryError::Vocabulary(format!(
                "the first two lines must be {PAD_TOKEN} and {UNK_TOKEN}"
            )));
        }
        let mut seen = BTreeSet::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || !seen.insert(t) {
                return Err(QueryError::Vocabulary(format!("line {}: empty or duplicate token", i + 1)));
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let words = normalize(text);
        if words.is_empty() {
            return Err(QueryError::EmptyText(text.to_string()));
        }
        Ok(words.iter().map(|w| self.id(w)).collect())
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map_or(UNK_TOKEN, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Prompt templates, each with exactly one `{}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates(Vec<String>);

pub const DEFAULT_TEMPLATES: &str = include_str!("../../resources/templates.txt");

impl Templates {
    /// One template per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let n = line.matches("{}").count();
            if n != 1 {
                return Err(QueryError::Template {
                    line: no + 1,
                    msg: format!("expected one {{}} placeholder, found {n}"),
                });
            }
            out.push(line.to_string());
        }
        Self::new(out)
    }

    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(QueryError::Template {
                line: 0,
                msg: "no templates".into(),
            });
        }
        for (i, t) in templates.iter().enumerate() {
            if t.matches("{}").count() != 1 {
                return Err(QueryError::Template {
                    line: i + 1,
                    msg: "expected exactly one {} placeholder".into(),
                });
            }
        }
        Ok(Self(templates))
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    /// Fills template `i`.
    pub fn fill(&self, i: usize, label: &str) -> String {
        self.0[i].replacen("{}", label, 1)
    }

    /// Fills a uniformly drawn template.
    pub fn apply<R: Rng + ?Sized>(&self, label: &str, rng: &mut R) -> String {
        let i = rng.random_range(0..self.0.len());
        self.fill(i, label)
    }
}

/// Free-function form of [`Templates::apply`].
pub fn apply_template<R: Rng + ?Sized>(label: &str, templates: &Templates, rng: &mut R) -> String {
    templates.apply(label, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn case_folding_and_unknowns() {
        let v = Vocabulary::from_texts(["red apple", "a photo of {}"]);
        assert_eq!(v.tokenize("Red apple").unwrap(), v.tokenize("red apple").unwrap());
        assert_eq!(v.tokenize("red pear").unwrap()[1], UNK);
        assert!(matches!(v.tokenize(""), Err(QueryError::EmptyText(_))));
        assert!(v.tokenize(" ,. ").is_err());
        assert_eq!(v.detokenize(&v.tokenize("A  photo, of RED apple!").unwrap()), "a photo of red apple");
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let v = Vocabulary::from_texts(["lying flat", "standing upright"]);
        assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::parse("a\nb\n").is_err());
    }

    #[test]
    fn template_substitution_and_validation() {
        let t = Templates::new(vec!["a photo of a {}".into()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(t.apply("cat", &mut rng), "a photo of a cat");
        assert!(Templates::parse("no placeholder").is_err());
        let e = Templates::parse("ok {}\n{} and {}").unwrap_err();
        assert!(matches!(e, QueryError::Template { line: 2, .. }));
        assert_eq!(Templates::builtin().as_slice().len(), 12);
    }
}
