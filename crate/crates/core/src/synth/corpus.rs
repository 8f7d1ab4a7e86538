use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::catalog::{gen_catalog, Attributes, ProductRecord};
use super::clicks::{gen_click_log, ClickConfig, ClickEvent, QueryRecord};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::vision::{Image, Roi};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub products: usize,
    pub categories: usize,
    pub image_size: usize,
    pub clicks: ClickConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            products: 2000,
            categories: 8,
            image_size: 64,
            clicks: ClickConfig::default(),
        }
    }
}

/// Generated catalog, queries and click log.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub products: Vec<ProductRecord>,
    pub queries: Vec<QueryRecord>,
    pub clicks: Vec<ClickEvent>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    products: usize,
    queries: usize,
    clicks: usize,
    image_size: usize,
}

#[derive(Serialize, Deserialize)]
struct ProductLine {
    product_id: u32,
    category: usize,
    attributes: Attributes,
    title: String,
    truth_box: Roi,
    image: String,
}

#[derive(Serialize, Deserialize)]
struct QueryLine {
    query_id: u32,
    text: String,
}

impl Corpus {
    pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Corpus> {
        let products = gen_catalog(cfg.products, cfg.categories, cfg.image_size, seed)?;
        let (queries, clicks) = gen_click_log(&products, &cfg.clicks, seed.wrapping_add(1))?;
        Ok(Corpus {
            vocab: Vocab::default(),
            products,
            queries,
            clicks,
        })
    }

    pub fn product(&self, id: u32) -> Option<&ProductRecord> {
        self.products.get(id as usize).filter(|p| p.product_id == id)
    }

    pub fn query(&self, id: u32) -> Option<&QueryRecord> {
        self.queries.get(id as usize).filter(|q| q.query_id == id)
    }

    /// Writes `manifest.json`, `vocab.txt`, `products.jsonl`, `images/*.png`,
    /// `queries.jsonl` and `clicks.tsv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        let side = self.products.first().map_or(0, |p| p.image.height());
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            products: self.products.len(),
            queries: self.queries.len(),
            clicks: self.clicks.len(),
            image_size: side,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join("vocab.txt"), self.vocab.words().join("\n") + "\n")?;

        let mut w = BufWriter::new(File::create(dir.join("products.jsonl"))?);
        for p in &self.products {
            let image = format!("images/{:06}.png", p.product_id);
            p.image.save_png(&dir.join(&image))?;
            let line = ProductLine {
                product_id: p.product_id,
                category: p.category,
                attributes: p.attributes,
                title: self.vocab.decode(&p.title),
                truth_box: p.truth_box,
                image,
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        w.flush()?;

        let mut w = BufWriter::new(File::create(dir.join("queries.jsonl"))?);
        for q in &self.queries {
            let line = QueryLine {
                query_id: q.query_id,
                text: self.vocab.decode(&q.tokens),
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        w.flush()?;

        let mut w = BufWriter::new(File::create(dir.join("clicks.tsv"))?);
        writeln!(w, "query_id\tproduct_id\ttimestamp\tcount")?;
        for c in &self.clicks {
            writeln!(w, "{}\t{}\t{}\t{}", c.query_id, c.product_id, c.timestamp, c.click_count)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::Missing(manifest_path));
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                "corpus",
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let vocab = Vocab::from_words(
            fs::read_to_string(dir.join("vocab.txt"))?
                .lines()
                .map(str::to_string)
                .collect(),
        );

        let mut products = Vec::with_capacity(manifest.products);
        for line in BufReader::new(File::open(dir.join("products.jsonl"))?).lines() {
            let l: ProductLine = serde_json::from_str(&line?)?;
            let image = Image::load_png(&dir.join(&l.image))?;
            products.push(ProductRecord {
                product_id: l.product_id,
                category: l.category,
                attributes: l.attributes,
                title: vocab.encode(&l.title),
                image,
                truth_box: l.truth_box,
            });
        }

        let mut queries = Vec::with_capacity(manifest.queries);
        for line in BufReader::new(File::open(dir.join("queries.jsonl"))?).lines() {
            let l: QueryLine = serde_json::from_str(&line?)?;
            queries.push(QueryRecord {
                query_id: l.query_id,
                tokens: vocab.encode(&l.text),
            });
        }

        let clicks = read_clicks(&dir.join("clicks.tsv"))?;
        if products.len() != manifest.products || queries.len() != manifest.queries || clicks.len() != manifest.clicks
        {
            return Err(Error::format("corpus", "record counts disagree with manifest"));
        }
        let corpus = Corpus {
            vocab,
            products,
            queries,
            clicks,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    /// Ids are dense and every click resolves.
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.products.iter().enumerate() {
            if p.product_id as usize != i {
                return Err(Error::format("corpus", format!("product ids must be dense, found {}", p.product_id)));
            }
        }
        for (i, q) in self.queries.iter().enumerate() {
            if q.query_id as usize != i {
                return Err(Error::format("corpus", format!("query ids must be dense, found {}", q.query_id)));
            }
        }
        for c in &self.clicks {
            if c.click_count == 0
                || c.product_id as usize >= self.products.len()
                || c.query_id as usize >= self.queries.len()
            {
                return Err(Error::format("corpus", format!("invalid click record {c:?}")));
            }
        }
        Ok(())
    }
}

/// Reads `query_id, product_id, timestamp, count` records (tab separated,
/// optional header line).
pub fn read_clicks(path: &Path) -> Result<Vec<ClickEvent>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.is_empty() || (n == 0 && line.starts_with("query_id")) {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let parse = |i: usize| -> Result<u64> {
            f.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::format("click log", format!("line {}: bad field {i}", n + 1)))
        };
        if f.len() != 4 {
            return Err(Error::format("click log", format!("line {}: expected 4 fields", n + 1)));
        }
        out.push(ClickEvent {
            query_id: parse(0)? as u32,
            product_id: parse(1)? as u32,
            timestamp: parse(2)?,
            click_count: parse(3)? as u32,
        });
    }
    Ok(out)
}
