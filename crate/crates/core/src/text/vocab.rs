use std::collections::HashMap;

/// Id reserved for padding. Its embedding row and salience are pinned to zero.
pub const PAD_ID: u32 = 0;
/// Id shared by every token that is not in the vocabulary.
pub const OOV_ID: u32 = 1;

const PAD_TOKEN: &str = "<pad>";
const OOV_TOKEN: &str = "<oov>";

/// Dense token → id map. Ids `0` and `1` are reserved for padding and
/// out-of-vocabulary tokens; every other id maps to exactly one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// A vocabulary holding only the reserved ids.
    pub fn new() -> Self {
        Vocabulary {
            tokens: vec![PAD_TOKEN.to_string(), OOV_TOKEN.to_string()],
            index: HashMap::new(),
        }
    }

    /// Builds a vocabulary from tokens in order. Duplicates keep their first id.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for token in tokens {
            vocab.insert(token);
        }
        vocab
    }

    /// Adds `token` if missing and returns its id.
    pub fn insert(&mut self, token: impl Into<String>) -> u32 {
        let token = token.into();
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id for `token`, falling back to [`OOV_ID`].
    pub fn id(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Number of ids including the reserved ones.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True when only the reserved ids exist.
    pub fn is_empty(&self) -> bool {
        self.tokens.len() == 2
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens[2..]
    }
}

/// Lowercases and splits on whitespace and punctuation.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|piece| !piece.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Maps `text` to token ids through `vocab`; unknown words become [`OOV_ID`].
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    split_words(text).iter().map(|w| vocab.id(w)).collect()
}
