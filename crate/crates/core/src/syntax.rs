//! Grammar-based parsing: error-node counting and logic-block extraction.

use std::collections::HashMap;
use std::ops::Range;

use thiserror::Error;
use tree_sitter::{Language, Node, Parser};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SyntaxError {
    #[error("no grammar for language `{0}`")]
    Unsupported(String),
    #[error("parser produced no tree for `{0}` input")]
    NoTree(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Grammar {
    C,
    Cpp,
    Go,
    Java,
    JavaScript,
    Python,
    Rust,
}

impl Grammar {
    pub const ALL: [Grammar; 7] = [
        Grammar::C,
        Grammar::Cpp,
        Grammar::Go,
        Grammar::Java,
        Grammar::JavaScript,
        Grammar::Python,
        Grammar::Rust,
    ];

    /// Accepts canonical tags and the usual fence/extension aliases.
    pub fn from_tag(tag: &str) -> Option<Grammar> {
        let g = match tag.trim().to_ascii_lowercase().as_str() {
            "c" | "h" => Grammar::C,
            "cpp" | "c++" | "cc" | "cxx" | "hpp" => Grammar::Cpp,
            "go" | "golang" => Grammar::Go,
            "java" => Grammar::Java,
            "javascript" | "js" | "jsx" | "mjs" | "node" => Grammar::JavaScript,
            "python" | "py" | "python3" => Grammar::Python,
            "rust" | "rs" => Grammar::Rust,
            _ => return None,
        };
        Some(g)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Grammar::C => "c",
            Grammar::Cpp => "cpp",
            Grammar::Go => "go",
            Grammar::Java => "java",
            Grammar::JavaScript => "javascript",
            Grammar::Python => "python",
            Grammar::Rust => "rust",
        }
    }

    fn language(self) -> Language {
        match self {
            Grammar::C => tree_sitter_c::LANGUAGE.into(),
            Grammar::Cpp => tree_sitter_cpp::LANGUAGE.into(),
            Grammar::Go => tree_sitter_go::LANGUAGE.into(),
            Grammar::Java => tree_sitter_java::LANGUAGE.into(),
            Grammar::JavaScript => tree_sitter_javascript::LANGUAGE.into(),
            Grammar::Python => tree_sitter_python::LANGUAGE.into(),
            Grammar::Rust => tree_sitter_rust::LANGUAGE.into(),
        }
    }

    /// Node kinds treated as basic logic blocks: bodies of functions, loops and
    /// branches, plus expression statements.
    pub fn block_kinds(self) -> &'static [&'static str] {
        match self {
            Grammar::C | Grammar::Cpp => &["compound_statement", "expression_statement"],
            Grammar::Go => &["block", "expression_statement"],
            Grammar::Java => &["block", "constructor_body", "expression_statement"],
            Grammar::JavaScript => &["statement_block", "expression_statement"],
            Grammar::Python | Grammar::Rust => &["block", "expression_statement"],
        }
    }
}

/// A candidate middle span taken from the syntax tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpan {
    pub kind: &'static str,
    pub depth: usize,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntaxSummary {
    pub error_nodes: usize,
    pub blocks: Vec<BlockSpan>,
}

impl SyntaxSummary {
    pub fn is_clean(&self) -> bool {
        self.error_nodes == 0
    }
}

/// Something that can parse source text for a set of languages.
///
/// Implementations are used from a single worker at a time; create one per worker.
pub trait GrammarParser {
    fn supports(&self, language: &str) -> bool;
    fn analyze(&mut self, language: &str, source: &str) -> Result<SyntaxSummary, SyntaxError>;
}

/// Tree-sitter backed parser for the bundled grammars.
#[derive(Default)]
pub struct TreeSitterParser {
    parsers: HashMap<Grammar, Parser>,
}

impl TreeSitterParser {
    pub fn new() -> Self {
        Self::default()
    }

    fn parser(&mut self, g: Grammar) -> &mut Parser {
        self.parsers.entry(g).or_insert_with(|| {
            let mut p = Parser::new();
            p.set_language(&g.language()).expect("bundled grammar matches runtime ABI");
            p
        })
    }
}

impl GrammarParser for TreeSitterParser {
    fn supports(&self, language: &str) -> bool {
        Grammar::from_tag(language).is_some()
    }

    fn analyze(&mut self, language: &str, source: &str) -> Result<SyntaxSummary, SyntaxError> {
        let g = Grammar::from_tag(language).ok_or_else(|| SyntaxError::Unsupported(language.to_string()))?;
        let tree = self
            .parser(g)
            .parse(source, None)
            .ok_or_else(|| SyntaxError::NoTree(g.tag().to_string()))?;
        let root = tree.root_node();
        let mut summary = SyntaxSummary { error_nodes: 0, blocks: Vec::new() };
        walk(root, 0, g.block_kinds(), &mut summary);
        if root.has_error() && summary.error_nodes == 0 {
            summary.error_nodes = 1;
        }
        Ok(summary)
    }
}

fn walk(node: Node, depth: usize, kinds: &[&'static str], out: &mut SyntaxSummary) {
    if node.is_error() || node.is_missing() {
        out.error_nodes += 1;
    }
    if node.is_named() && node.start_byte() < node.end_byte() {
        if let Some(kind) = kinds.iter().find(|k| **k == node.kind()) {
            out.blocks.push(BlockSpan { kind, depth, range: node.start_byte()..node.end_byte() });
        }
    }
    let mut cursor = node.walk();
    for child in node.children(&mut cursor) {
        walk(child, depth + 1, kinds, out);
    }
}
