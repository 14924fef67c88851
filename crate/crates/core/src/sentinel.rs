//! Special-token registry and detection of literal sentinel strings in raw text.
//!
//! The registry is a fixed table. Rendered training samples are built from these
//! surfaces, so any document that already contains one of them verbatim cannot be
//! rendered unambiguously and is dropped upstream.

use serde::Serialize;
use thiserror::Error;

/// Vocabulary size of the tokenizer the ids below belong to. Documentation only.
pub const VOCAB_SIZE: usize = 151_646;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Sentinel {
    EndOfText,
    FimPrefix,
    FimMiddle,
    FimSuffix,
    FimPad,
    RepoName,
    FileSep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SentinelToken {
    pub name: &'static str,
    pub surface: &'static str,
    pub id: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("unknown sentinel name `{0}`")]
    UnknownName(String),
}

const TABLE: [(Sentinel, SentinelToken); 7] = [
    (
        Sentinel::EndOfText,
        SentinelToken { name: "endoftext", surface: "<|endoftext|>", id: 151643 },
    ),
    (
        Sentinel::FimPrefix,
        SentinelToken { name: "fim_prefix", surface: "<|fim_prefix|>", id: 151659 },
    ),
    (
        Sentinel::FimMiddle,
        SentinelToken { name: "fim_middle", surface: "<|fim_middle|>", id: 151660 },
    ),
    (
        Sentinel::FimSuffix,
        SentinelToken { name: "fim_suffix", surface: "<|fim_suffix|>", id: 151661 },
    ),
    (
        Sentinel::FimPad,
        SentinelToken { name: "fim_pad", surface: "<|fim_pad|>", id: 151662 },
    ),
    (
        Sentinel::RepoName,
        SentinelToken { name: "repo_name", surface: "<|repo_name|>", id: 151663 },
    ),
    (
        Sentinel::FileSep,
        SentinelToken { name: "file_sep", surface: "<|file_sep|>", id: 151664 },
    ),
];

pub const END_OF_TEXT: &str = "<|endoftext|>";
pub const FIM_PREFIX: &str = "<|fim_prefix|>";
pub const FIM_MIDDLE: &str = "<|fim_middle|>";
pub const FIM_SUFFIX: &str = "<|fim_suffix|>";
pub const FIM_PAD: &str = "<|fim_pad|>";
pub const REPO_NAME: &str = "<|repo_name|>";
pub const FILE_SEP: &str = "<|file_sep|>";

impl Sentinel {
    pub const ALL: [Sentinel; 7] = [
        Sentinel::EndOfText,
        Sentinel::FimPrefix,
        Sentinel::FimMiddle,
        Sentinel::FimSuffix,
        Sentinel::FimPad,
        Sentinel::RepoName,
        Sentinel::FileSep,
    ];

    pub fn token(self) -> &'static SentinelToken {
        &TABLE[self as usize].1
    }

    pub fn surface(self) -> &'static str {
        self.token().surface
    }

    pub fn name(self) -> &'static str {
        self.token().name
    }

    pub fn id(self) -> u32 {
        self.token().id
    }
}

/// Every registered token, in table order.
pub fn registry() -> impl Iterator<Item = &'static SentinelToken> {
    TABLE.iter().map(|(_, tok)| tok)
}

pub fn lookup(name: &str) -> Result<&'static SentinelToken, RegistryError> {
    TABLE
        .iter()
        .map(|(_, tok)| tok)
        .find(|tok| tok.name == name)
        .ok_or_else(|| RegistryError::UnknownName(name.to_string()))
}

/// Registry as a JSON array of `{name, surface, id}` for tokenizer configuration.
pub fn registry_json() -> String {
    let entries: Vec<&SentinelToken> = registry().collect();
    serde_json::to_string_pretty(&entries).expect("static registry serializes")
}

/// Every occurrence of a sentinel surface in `text`, ascending by byte offset.
///
/// All surfaces share the `<|` opener and `|>` closer and none contains another, so a
/// single scan over `<|` candidates suffices.
pub fn find_sentinel_collisions(text: &str) -> Vec<(Sentinel, usize)> {
    let bytes = text.as_bytes();
    let mut hits = Vec::new();
    let mut from = 0;
    while let Some(pos) = find_from(bytes, b"<|", from) {
        let rest = &text[pos..];
        match Sentinel::ALL.iter().find(|s| rest.starts_with(s.surface())) {
            Some(&s) => {
                hits.push((s, pos));
                from = pos + s.surface().len();
            }
            None => from = pos + 1,
        }
    }
    hits
}

pub fn contains_sentinel(text: &str) -> bool {
    text.contains("<|") && !find_sentinel_collisions(text).is_empty()
}

fn find_from(haystack: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    haystack
        .get(from..)?
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_known_names() {
        let eot = lookup("endoftext").unwrap();
        assert_eq!(eot.surface, "<|endoftext|>");
        assert_eq!(eot.id, 151643);
        let repo = lookup("repo_name").unwrap();
        assert_eq!((repo.surface, repo.id), ("<|repo_name|>", 151663));
        let pad = lookup("fim_pad").unwrap();
        assert_eq!((pad.surface, pad.id), ("<|fim_pad|>", 151662));
    }

    #[test]
    fn lookup_unknown_name() {
        assert_eq!(
            lookup("bos"),
            Err(RegistryError::UnknownName("bos".to_string()))
        );
    }

    #[test]
    fn enum_and_table_agree() {
        for s in Sentinel::ALL {
            assert_eq!(TABLE[s as usize].0, s);
        }
        assert_eq!(Sentinel::FileSep.surface(), FILE_SEP);
        assert_eq!(Sentinel::FimPrefix.surface(), FIM_PREFIX);
        assert_eq!(Sentinel::FimSuffix.surface(), FIM_SUFFIX);
        assert_eq!(Sentinel::FimMiddle.surface(), FIM_MIDDLE);
        assert_eq!(Sentinel::FimPad.surface(), FIM_PAD);
        assert_eq!(Sentinel::RepoName.surface(), REPO_NAME);
        assert_eq!(Sentinel::EndOfText.surface(), END_OF_TEXT);
    }

    #[test]
    fn surfaces_do_not_overlap() {
        for a in registry() {
            assert!(!a.surface.is_empty());
            for b in registry() {
                if a.name != b.name {
                    assert!(!a.surface.contains(b.surface));
                }
            }
        }
    }

    #[test]
    fn collisions_simple() {
        assert!(find_sentinel_collisions("fn main() {}").is_empty());
        assert_eq!(
            find_sentinel_collisions("x = \"<|endoftext|>\""),
            vec![(Sentinel::EndOfText, 5)]
        );
        assert_eq!(
            find_sentinel_collisions("<|<|file_sep|>|>"),
            vec![(Sentinel::FileSep, 2)]
        );
    }

    #[test]
    fn json_export_round_trips_fields() {
        let v: serde_json::Value = serde_json::from_str(&registry_json()).unwrap();
        let arr = v.as_array().unwrap();
        assert_eq!(arr.len(), 7);
        assert_eq!(arr[0]["name"], "endoftext");
        assert_eq!(arr[6]["id"], 151664);
    }
}
