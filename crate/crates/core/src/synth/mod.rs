//! Deterministic synthetic catalog, queries and click log.
//!
//! Products carry attribute-coded titles and images: one coloured shape on a
//! light, category-tinted background. Queries are 1-3 of a product's
//! category/colour/shape/size words, so ground-truth relevance is attribute
//! containment.

mod catalog;
mod clicks;
mod corpus;
pub mod vocab;

#[cfg(test)]
mod tests;

pub use catalog::{draw_product, gen_catalog, Attributes, ProductRecord};
pub use clicks::{gen_click_log, relevant_products, split_by_time, ClickConfig, ClickEvent, QueryRecord};
pub use corpus::{read_clicks, Corpus, DataConfig, FORMAT_VERSION};
pub use vocab::Vocab;
