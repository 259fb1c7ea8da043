//! Unsupervised abstractive summarization for news articles.
//!
//! The pipeline: harvest (lead, body) pairs from raw articles by exploiting
//! lead bias, pretrain a transformer encoder-decoder to reconstruct leads,
//! then finetune on the target corpus without any reference summaries by
//! combining a theme-consistency objective with denoising reconstruction.
//! Generation is beam search; evaluation is recall-oriented n-gram overlap.

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod train;
pub mod tokenizer;
pub mod verify;

pub use error::{Error, Result};

use std::path::Path;

/// Write via a sibling temp file and rename, so readers never observe a
/// half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path.file_name().map(|n| n.to_os_string()).ok_or_else(|| {
        Error::arg("write_atomic", format!("path {} has no file name", path.display()))
    })?;
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

// Every code block in the guide under book/ runs as a doc-test, so the
// prose can never drift from the library it describes.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/tokenizer.md")]
    mod tokenizer {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
