pub mod budget;
pub mod decontam;
pub mod document;
pub mod filter;
pub mod gate;
pub mod ingest;
pub mod jsonl;
pub mod keyed;
pub mod mixture;
pub mod needle;
pub mod sentinel;
pub mod fim;
pub mod syntax;
pub mod pack;
pub mod pipeline;
