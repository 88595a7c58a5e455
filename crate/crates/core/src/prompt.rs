//! Contrastive disentangled prompts: identifiers, templates, the content index
//! used by attention control, and the toy vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const NULL_TOKEN: &str = "<null>";
pub const PAD_ID: u32 = 0;
pub const NULL_ID: u32 = 1;

const NEGATOR: &str = "not";
const PREFIX: [&str; 3] = ["a", "drawing", "with"];
const STYLE_DESCRIPTOR: [&str; 2] = ["style", "of"];
const CONTENT_DESCRIPTOR: &str = "portrait";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Style,
    Content,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

/// A rare token bound to one attribute of one image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Identifier {
    base: String,
    pub polarity: Polarity,
    pub role: Role,
    pub domain: Domain,
}

impl Identifier {
    pub fn new(base: &str, polarity: Polarity, role: Role, domain: Domain) -> Result<Self> {
        validate_base(base)?;
        Ok(Self {
            base: base.to_string(),
            polarity,
            role,
            domain,
        })
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    /// The single vocabulary token for this identifier: `[base]` or `[not base]`.
    pub fn render(&self) -> String {
        match self.polarity {
            Polarity::Positive => format!("[{}]", self.base),
            Polarity::Negative => format!("[{NEGATOR} {}]", self.base),
        }
    }

    pub fn negated(&self) -> Identifier {
        Identifier {
            polarity: match self.polarity {
                Polarity::Positive => Polarity::Negative,
                Polarity::Negative => Polarity::Positive,
            },
            ..self.clone()
        }
    }
}

fn validate_base(base: &str) -> Result<()> {
    if base.is_empty()
        || base
            .chars()
            .any(|c| c.is_whitespace() || matches!(c, '[' | ']' | '(' | ')' | '{' | '}'))
    {
        return Err(Error::InvalidIdentifier(base.to_string()));
    }
    Ok(())
}

/// The four positive identifiers `S_src`, `S_tgt`, `C_src`, `C_tgt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentifierSet {
    pub style_src: Identifier,
    pub style_tgt: Identifier,
    pub content_src: Identifier,
    pub content_tgt: Identifier,
}

impl IdentifierSet {
    pub fn new(style_src: &str, style_tgt: &str, content_src: &str, content_tgt: &str) -> Result<Self> {
        let bases = [style_src, style_tgt, content_src, content_tgt];
        for (i, b) in bases.iter().enumerate() {
            validate_base(b)?;
            if bases[..i].contains(b) {
                return Err(Error::DuplicateIdentifier(b.to_string()));
            }
        }
        use {Domain::*, Polarity::Positive, Role::*};
        Ok(Self {
            style_src: Identifier::new(style_src, Positive, Style, Source)?,
            style_tgt: Identifier::new(style_tgt, Positive, Style, Target)?,
            content_src: Identifier::new(content_src, Positive, Content, Source)?,
            content_tgt: Identifier::new(content_tgt, Positive, Content, Target)?,
        })
    }

    pub fn bases(&self) -> [&str; 4] {
        [
            self.style_src.base(),
            self.style_tgt.base(),
            self.content_src.base(),
            self.content_tgt.base(),
        ]
    }
}

impl Default for IdentifierSet {
    fn default() -> Self {
        IdentifierSet::new("ak47", "aug", "sks", "m4a1").expect("default identifiers are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptKind {
    Src,
    Tgt,
    Aux,
    Sty,
    SrcAug,
    StyAug,
    /// The unconditional (null word) prompt used by guidance.
    Null,
}

impl PromptKind {
    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Src => "src",
            PromptKind::Tgt => "tgt",
            PromptKind::Aux => "aux",
            PromptKind::Sty => "sty",
            PromptKind::SrcAug => "src_aug",
            PromptKind::StyAug => "sty_aug",
            PromptKind::Null => "null",
        }
    }

    fn is_training(self) -> bool {
        matches!(self, PromptKind::Src | PromptKind::Tgt | PromptKind::Aux)
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "src" => PromptKind::Src,
            "tgt" => PromptKind::Tgt,
            "aux" => PromptKind::Aux,
            "sty" => PromptKind::Sty,
            "src_aug" => PromptKind::SrcAug,
            "sty_aug" => PromptKind::StyAug,
            "null" => PromptKind::Null,
            other => return Err(Error::UnknownPromptKind(other.to_string())),
        })
    }
}

/// Whether prompts carry negative identifiers. `PositiveOnly` is the ablation
/// without the contrastive half of each pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PromptStyle {
    #[default]
    Contrastive,
    PositiveOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub kind: PromptKind,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    pub style_indexes: BTreeSet<usize>,
    pub content_indexes: BTreeSet<usize>,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Space-joined token strings, e.g. `a drawing with [ak47] [not aug] style of portrait`.
    pub fn render(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Token ↔ id map. Ids are assigned in first-seen order after the reserved
/// pad and null tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.register(PAD_TOKEN);
        v.register(NULL_TOKEN);
        v
    }

    /// A vocabulary holding every token any template can emit for `ids`,
    /// registered in a fixed order so training and inference agree on ids.
    pub fn for_identifiers(ids: &IdentifierSet) -> Self {
        let mut v = Vocab::new();
        for w in PREFIX.iter().chain(&STYLE_DESCRIPTOR).chain([&CONTENT_DESCRIPTOR]) {
            v.register(w);
        }
        for id in [&ids.style_src, &ids.style_tgt, &ids.content_src, &ids.content_tgt] {
            v.register(&id.render());
            v.register(&id.negated().render());
        }
        v
    }

    pub fn register(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(&h.finalize()[..8])
    }
}

pub fn null_prompt() -> Prompt {
    Prompt {
        kind: PromptKind::Null,
        tokens: vec![NULL_TOKEN.to_string()],
        token_ids: vec![NULL_ID],
        style_indexes: BTreeSet::new(),
        content_indexes: BTreeSet::new(),
    }
}

/// Builds a contrastive prompt of the given kind.
pub fn build_prompt(
    kind: PromptKind,
    ids: &IdentifierSet,
    n_s: usize,
    n_c: usize,
    vocab: &mut Vocab,
) -> Result<Prompt> {
    build_prompt_styled(kind, ids, n_s, n_c, PromptStyle::Contrastive, vocab)
}

pub fn build_prompt_styled(
    kind: PromptKind,
    ids: &IdentifierSet,
    n_s: usize,
    n_c: usize,
    style: PromptStyle,
    vocab: &mut Vocab,
) -> Result<Prompt> {
    if n_s < 1 || n_c < 1 {
        return Err(Error::InvalidRepetition { n_s, n_c });
    }
    if kind.is_training() && (n_s != 1 || n_c != 1) {
        return Err(Error::TrainingPromptRepetition { kind: kind.name() });
    }
    let bases = ids.bases();
    for (i, b) in bases.iter().enumerate() {
        if bases[..i].contains(b) {
            return Err(Error::DuplicateIdentifier(b.to_string()));
        }
    }
    if kind == PromptKind::Null {
        return Ok(null_prompt());
    }

    let (style_pos, style_neg) = match kind {
        PromptKind::Src | PromptKind::Aux | PromptKind::SrcAug => (&ids.style_src, &ids.style_tgt),
        _ => (&ids.style_tgt, &ids.style_src),
    };
    let content = match kind {
        PromptKind::Aux => None,
        PromptKind::Tgt => Some((&ids.content_tgt, &ids.content_src)),
        _ => Some((&ids.content_src, &ids.content_tgt)),
    };

    let pair = |pos: &Identifier, neg: &Identifier| -> Vec<String> {
        match style {
            PromptStyle::Contrastive => vec![pos.render(), neg.negated().render()],
            PromptStyle::PositiveOnly => vec![pos.render()],
        }
    };

    let mut tokens: Vec<String> = PREFIX.iter().map(|s| s.to_string()).collect();
    let mut style_indexes = BTreeSet::new();
    let mut content_indexes = BTreeSet::new();
    for _ in 0..n_s {
        for t in pair(style_pos, style_neg) {
            style_indexes.insert(tokens.len());
            tokens.push(t);
        }
    }
    tokens.extend(STYLE_DESCRIPTOR.iter().map(|s| s.to_string()));
    if let Some((pos, neg)) = content {
        for _ in 0..n_c {
            for t in pair(pos, neg) {
                content_indexes.insert(tokens.len());
                tokens.push(t);
            }
        }
    }
    content_indexes.insert(tokens.len());
    tokens.push(CONTENT_DESCRIPTOR.to_string());

    let token_ids = tokens.iter().map(|t| vocab.register(t)).collect();
    Ok(Prompt {
        kind,
        tokens,
        token_ids,
        style_indexes,
        content_indexes,
    })
}

/// Positions whose attention columns are taken from the recording pass:
/// every source content identifier, negated target content identifier and
/// the `portrait` descriptor.
pub fn content_index(p: &Prompt) -> Result<BTreeSet<usize>> {
    match p.kind {
        PromptKind::Src | PromptKind::Sty | PromptKind::SrcAug | PromptKind::StyAug => Ok(p.content_indexes.clone()),
        other => Err(Error::NoContentIndex(other.name())),
    }
}

/// Maps the prompt's tokens to ids, registering unseen tokens.
pub fn tokenize(p: &Prompt, vocab: &mut Vocab) -> Vec<u32> {
    p.tokens.iter().map(|t| vocab.register(t)).collect()
}

pub fn detokenize(ids: &[u32], vocab: &Vocab) -> Result<Vec<String>> {
    ids.iter()
        .map(|&id| {
            vocab
                .token(id)
                .map(str::to_string)
                .ok_or(Error::TokenOutOfRange { id, size: vocab.len() })
        })
        .collect()
}

/// One rendered prompt per line.
pub fn render_prompts<'a>(prompts: impl IntoIterator<Item = &'a Prompt>) -> String {
    let mut out = String::new();
    for p in prompts {
        out.push_str(&p.render());
        out.push('\n');
    }
    out
}
