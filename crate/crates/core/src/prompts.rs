//! Prompt templates for the four text roles and a whitespace tokenizer.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// The fifteen evaluation scenes.
pub const SCENE_PHRASES: [&str; 15] = [
    "in the rain",
    "in the river",
    "in the sky",
    "in the room",
    "in the basket",
    "in the TV",
    "in the snow",
    "on the sofa",
    "on the bed",
    "on the table",
    "on the stage",
    "on the top of mountain",
    "on the playground",
    "on the floor",
    "on the grass",
];

pub const DEFAULT_IDENTIFIER: &str = "sks";

/// A prompt as a sequence of words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Prompt(pub Vec<String>);

impl Prompt {
    pub fn parse(text: &str) -> Self {
        Prompt(text.split_whitespace().map(str::to_owned).collect())
    }

    pub fn words(&self) -> &[String] {
        &self.0
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptTemplate {
    pub identifier: Option<String>,
    pub class_noun: Option<String>,
    pub scene: Option<String>,
}

impl PromptTemplate {
    pub fn new(identifier: &str, class_noun: &str, scene: Option<&str>) -> Self {
        Self {
            identifier: Some(identifier.to_owned()),
            class_noun: Some(class_noun.to_owned()),
            scene: scene.map(str::to_owned),
        }
    }

    pub fn with_scene(&self, scene: Option<&str>) -> Self {
        Self {
            scene: scene.map(str::to_owned),
            ..self.clone()
        }
    }

    fn identifier(&self) -> Result<&str> {
        self.identifier.as_deref().ok_or(Error::MissingField("identifier"))
    }

    fn class_noun(&self) -> Result<&str> {
        self.class_noun.as_deref().ok_or(Error::MissingField("class_noun"))
    }

    fn scene(&self) -> Result<&str> {
        self.scene.as_deref().ok_or(Error::MissingField("scene"))
    }

    /// Checks the identifier is a single word that collides with no class
    /// or scene word, and that class and scene come from the given lists.
    pub fn validate(&self, classes: &[String], scenes: &[String]) -> Result<()> {
        let id = self.identifier()?;
        if id.split_whitespace().count() != 1 {
            return Err(Error::config("identifier", "must be a single word"));
        }
        let class = self.class_noun()?;
        if !classes.iter().any(|c| c == class) {
            return Err(Error::config("class_noun", format!("`{class}` is not a known class")));
        }
        if let Some(scene) = &self.scene {
            if !scenes.iter().any(|s| s == scene) {
                return Err(Error::config("scene", format!("`{scene}` is not a known scene")));
            }
        }
        let clash = classes
            .iter()
            .chain(scenes)
            .flat_map(|p| p.split_whitespace())
            .any(|w| w == id);
        if clash {
            return Err(Error::config(
                "identifier",
                format!("`{id}` collides with a class or scene word"),
            ));
        }
        Ok(())
    }
}

fn words(parts: &[&str]) -> Prompt {
    Prompt(
        parts
            .iter()
            .flat_map(|p| p.split_whitespace())
            .map(str::to_owned)
            .collect(),
    )
}

/// "a [identifier] [class noun]"
pub fn instance_text(tpl: &PromptTemplate) -> Result<Prompt> {
    Ok(words(&["a", tpl.identifier()?, tpl.class_noun()?]))
}

/// "a [class noun]"
pub fn class_text(tpl: &PromptTemplate) -> Result<Prompt> {
    Ok(words(&["a", tpl.class_noun()?]))
}

/// "a [class noun] [scene]"
pub fn class_scene_text(tpl: &PromptTemplate) -> Result<Prompt> {
    Ok(words(&["a", tpl.class_noun()?, tpl.scene()?]))
}

/// "a [identifier] [class noun] [scene]"
pub fn instance_scene_text(tpl: &PromptTemplate) -> Result<Prompt> {
    Ok(words(&["a", tpl.identifier()?, tpl.class_noun()?, tpl.scene()?]))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::config("vocabulary", format!("bad token {t:?} at line {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::config("vocabulary", format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary covering the article, identifier, classes and every word of
    /// every scene phrase, in first-seen order.
    pub fn build(identifier: &str, classes: &[String], scenes: &[&str]) -> Result<Self> {
        let mut tokens: Vec<String> = Vec::new();
        let mut push = |w: &str| {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_owned());
            }
        };
        push("a");
        push(identifier);
        for c in classes {
            push(c);
        }
        for s in scenes {
            for w in s.split_whitespace() {
                push(w);
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn tokenize(&self, prompt: &Prompt) -> Result<Vec<usize>> {
        prompt
            .words()
            .iter()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownWord(w.clone())))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<Prompt> {
        ids.iter()
            .map(|&i| self.tokens.get(i).cloned().ok_or(Error::UnknownToken(i)))
            .collect::<Result<Vec<_>>>()
            .map(Prompt)
    }

    /// One token per line; the id is the line index.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse_file(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_file(&text)
    }
}
