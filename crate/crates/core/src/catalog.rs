//! Open-world tool repository.
//!
//! A catalog file holds one JSON object per line:
//!
//! ```text
//! {"api_id":0,"category":"Data","tool_name":"genderize","api_name":"Predict","description":"...","input_schema":[{"name":"name","type":"string","required":true}]}
//! ```
//!
//! Loading validates the identity invariants up front so every other module
//! can treat lookups as total.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("failed to read catalog")]
    Io(#[from] std::io::Error),
    #[error("line {line}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: duplicate api_id {api_id}")]
    DuplicateId { line: usize, api_id: u64 },
    #[error("line {line}: duplicate tool identity {category}/{tool_name}/{api_name}")]
    DuplicateIdentity {
        line: usize,
        category: String,
        tool_name: String,
        api_name: String,
    },
    #[error("line {line}: api_id {api_id} has an empty description")]
    EmptyDescription { line: usize, api_id: u64 },
    #[error("unknown api_id {0}")]
    UnknownId(u64),
    #[error("{}", path.display())]
    File {
        path: std::path::PathBuf,
        #[source]
        source: Box<CatalogError>,
    },
}

/// One declared input parameter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type", default)]
    pub semantic_type: String,
    #[serde(default)]
    pub required: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, semantic_type: impl Into<String>, required: bool) -> Self {
        Self {
            name: name.into(),
            semantic_type: semantic_type.into(),
            required,
        }
    }
}

/// One API in the repository.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRecord {
    pub api_id: u64,
    pub category: String,
    pub tool_name: String,
    pub api_name: String,
    pub description: String,
    #[serde(default)]
    pub input_schema: Vec<ParamSpec>,
}

impl ToolRecord {
    /// Text handed to the embedder when indexing this record.
    pub fn document_text(&self) -> String {
        format!(
            "{} | {} | {} | {}",
            self.category, self.tool_name, self.api_name, self.description
        )
    }

    pub fn required_params(&self) -> impl Iterator<Item = &str> {
        self.input_schema
            .iter()
            .filter(|p| p.required)
            .map(|p| p.name.as_str())
    }

    /// Whether a (possibly partial) call identity names this record. Absent
    /// fields match anything.
    pub fn matches(&self, category: Option<&str>, tool_name: &str, api_name: Option<&str>) -> bool {
        self.tool_name == tool_name
            && category.is_none_or(|c| c == self.category)
            && api_name.is_none_or(|a| a == self.api_name)
    }
}

/// Summary counts reported by `catalog stats`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CatalogStats {
    pub records: usize,
    pub categories: usize,
    pub tools: usize,
    pub params: usize,
    pub required_params: usize,
    pub per_category: BTreeMap<String, usize>,
}

/// Validated, immutable tool repository.
#[derive(Clone, Debug)]
pub struct Catalog {
    records: Vec<ToolRecord>,
    domain_tag: Option<String>,
    by_id: HashMap<u64, usize>,
}

impl PartialEq for Catalog {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records && self.domain_tag == other.domain_tag
    }
}

impl Catalog {
    /// Validates `records` in order. Line numbers in errors are 1-based
    /// positions in `records`.
    pub fn from_records(records: Vec<ToolRecord>) -> Result<Self, CatalogError> {
        let mut by_id = HashMap::with_capacity(records.len());
        let mut identities = HashSet::with_capacity(records.len());
        for (idx, record) in records.iter().enumerate() {
            let line = idx + 1;
            if record.description.trim().is_empty() {
                return Err(CatalogError::EmptyDescription {
                    line,
                    api_id: record.api_id,
                });
            }
            if by_id.insert(record.api_id, idx).is_some() {
                return Err(CatalogError::DuplicateId {
                    line,
                    api_id: record.api_id,
                });
            }
            let identity = (
                record.category.as_str(),
                record.tool_name.as_str(),
                record.api_name.as_str(),
            );
            if !identities.insert(identity) {
                return Err(CatalogError::DuplicateIdentity {
                    line,
                    category: record.category.clone(),
                    tool_name: record.tool_name.clone(),
                    api_name: record.api_name.clone(),
                });
            }
        }
        Ok(Self {
            records,
            domain_tag: None,
            by_id,
        })
    }

    /// Streams a line-delimited catalog. Blank lines are skipped.
    pub fn from_reader(reader: impl BufRead) -> Result<Self, CatalogError> {
        let mut records = Vec::new();
        let mut lines = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ToolRecord =
                serde_json::from_str(&line).map_err(|source| CatalogError::Parse {
                    line: idx + 1,
                    source,
                })?;
            records.push(record);
            lines.push(idx + 1);
        }
        // Re-map positional errors back to physical file lines.
        Self::from_records(records).map_err(|err| remap_line(err, &lines))
    }

    pub fn with_domain_tag(mut self, tag: impl Into<String>) -> Self {
        self.domain_tag = Some(tag.into());
        self
    }

    pub fn domain_tag(&self) -> Option<&str> {
        self.domain_tag.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ToolRecord] {
        &self.records
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ToolRecord> {
        self.records.iter()
    }

    pub fn get(&self, api_id: u64) -> Option<&ToolRecord> {
        self.by_id.get(&api_id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, api_id: u64) -> bool {
        self.by_id.contains_key(&api_id)
    }

    pub fn lookup(&self, api_id: u64) -> Result<&ToolRecord, CatalogError> {
        self.get(api_id).ok_or(CatalogError::UnknownId(api_id))
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.records.iter().map(|r| r.api_id)
    }

    /// First record, in file order, matching a possibly partial identity.
    pub fn find(
        &self,
        category: Option<&str>,
        tool_name: &str,
        api_name: Option<&str>,
    ) -> Option<&ToolRecord> {
        self.records
            .iter()
            .find(|r| r.matches(category, tool_name, api_name))
    }

    /// Restricts the catalog to `ids`, keeping file order.
    pub fn subset_by_domain(&self, ids: &BTreeSet<u64>) -> Result<Catalog, CatalogError> {
        if let Some(&missing) = ids.iter().find(|id| !self.contains(**id)) {
            return Err(CatalogError::UnknownId(missing));
        }
        let records = self
            .records
            .iter()
            .filter(|r| ids.contains(&r.api_id))
            .cloned()
            .collect();
        let mut subset = Catalog::from_records(records)?;
        subset.domain_tag = self.domain_tag.clone();
        Ok(subset)
    }

    /// One JSON record per line, in catalog order.
    pub fn write_jsonl(&self, mut writer: impl std::io::Write) -> std::io::Result<()> {
        for record in &self.records {
            serde_json::to_writer(&mut writer, record)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn stats(&self) -> CatalogStats {
        let mut per_category = BTreeMap::new();
        let mut tools = HashSet::new();
        let mut params = 0;
        let mut required_params = 0;
        for r in &self.records {
            *per_category.entry(r.category.clone()).or_insert(0) += 1;
            tools.insert((r.category.as_str(), r.tool_name.as_str()));
            params += r.input_schema.len();
            required_params += r.input_schema.iter().filter(|p| p.required).count();
        }
        CatalogStats {
            records: self.records.len(),
            categories: per_category.len(),
            tools: tools.len(),
            params,
            required_params,
            per_category,
        }
    }
}

impl<'a> IntoIterator for &'a Catalog {
    type Item = &'a ToolRecord;
    type IntoIter = std::slice::Iter<'a, ToolRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

fn remap_line(err: CatalogError, lines: &[usize]) -> CatalogError {
    let physical = |line: usize| lines.get(line - 1).copied().unwrap_or(line);
    match err {
        CatalogError::DuplicateId { line, api_id } => CatalogError::DuplicateId {
            line: physical(line),
            api_id,
        },
        CatalogError::DuplicateIdentity {
            line,
            category,
            tool_name,
            api_name,
        } => CatalogError::DuplicateIdentity {
            line: physical(line),
            category,
            tool_name,
            api_name,
        },
        CatalogError::EmptyDescription { line, api_id } => CatalogError::EmptyDescription {
            line: physical(line),
            api_id,
        },
        other => other,
    }
}

/// Loads and validates a catalog file.
pub fn load_catalog(path: impl AsRef<Path>) -> Result<Catalog, CatalogError> {
    let path = path.as_ref();
    let catalog = File::open(path)
        .map_err(CatalogError::from)
        .and_then(|file| Catalog::from_reader(BufReader::new(file)))
        .map_err(|source| CatalogError::File {
            path: path.to_path_buf(),
            source: Box::new(source),
        })?;
    log::info!("loaded catalog with {} records", catalog.len());
    Ok(catalog)
}
