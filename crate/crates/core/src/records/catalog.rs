use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered class names; a class is referred to by its position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassCatalog {
    names: Vec<String>,
}

impl ClassCatalog {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::validation("class catalog is empty"));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(Error::validation("class names must be non-empty"));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::validation(format!("duplicate class `{name}`")));
            }
        }
        Ok(ClassCatalog { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for ClassCatalog {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        ClassCatalog::new(names)
    }
}

impl From<ClassCatalog> for Vec<String> {
    fn from(c: ClassCatalog) -> Self {
        c.names
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DomainCatalogRepr {
    ids: Vec<String>,
    labeled: String,
    #[serde(default)]
    labeled_external: bool,
}

/// Domain identifiers plus the designation of the labeled domain.
///
/// When `labeled_external` is set, the labeled domain is not part of the
/// prediction corpus and every listed id is an unlabeled domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DomainCatalogRepr", into = "DomainCatalogRepr")]
pub struct DomainCatalog {
    ids: Vec<String>,
    labeled: String,
    labeled_external: bool,
}

impl DomainCatalog {
    /// Catalog whose labeled domain is one of `ids`.
    pub fn new<S: Into<String>>(
        ids: impl IntoIterator<Item = S>,
        labeled: impl Into<String>,
    ) -> Result<Self> {
        Self::build(
            ids.into_iter().map(Into::into).collect(),
            labeled.into(),
            false,
        )
    }

    /// Catalog whose labeled domain lives outside the prediction corpus.
    pub fn with_external_labeled<S: Into<String>>(
        ids: impl IntoIterator<Item = S>,
        labeled: impl Into<String>,
    ) -> Result<Self> {
        Self::build(
            ids.into_iter().map(Into::into).collect(),
            labeled.into(),
            true,
        )
    }

    fn build(ids: Vec<String>, labeled: String, labeled_external: bool) -> Result<Self> {
        let mut seen = HashSet::new();
        for id in &ids {
            if id.is_empty() {
                return Err(Error::validation("domain ids must be non-empty"));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::validation(format!("duplicate domain `{id}`")));
            }
        }
        let listed = seen.contains(labeled.as_str());
        if labeled_external && listed {
            return Err(Error::validation(format!(
                "labeled domain `{labeled}` is marked external but also listed"
            )));
        }
        if !labeled_external && !listed {
            return Err(Error::validation(format!(
                "labeled domain `{labeled}` is not among the domain ids"
            )));
        }
        let catalog = DomainCatalog {
            ids,
            labeled,
            labeled_external,
        };
        if catalog.unlabeled().is_empty() {
            return Err(Error::validation(
                "at least one unlabeled domain is required",
            ));
        }
        Ok(catalog)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labeled(&self) -> &str {
        &self.labeled
    }

    pub fn labeled_is_external(&self) -> bool {
        self.labeled_external
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.iter().any(|d| d == id)
    }

    /// Unlabeled domain ids in catalog order; position is the domain index.
    pub fn unlabeled(&self) -> Vec<String> {
        self.ids
            .iter()
            .filter(|d| self.labeled_external || **d != self.labeled)
            .cloned()
            .collect()
    }
}

impl TryFrom<DomainCatalogRepr> for DomainCatalog {
    type Error = Error;

    fn try_from(r: DomainCatalogRepr) -> Result<Self> {
        DomainCatalog::build(r.ids, r.labeled, r.labeled_external)
    }
}

impl From<DomainCatalog> for DomainCatalogRepr {
    fn from(d: DomainCatalog) -> Self {
        DomainCatalogRepr {
            ids: d.ids,
            labeled: d.labeled,
            labeled_external: d.labeled_external,
        }
    }
}

/// The catalog config file: class names plus domains.
///
/// ```toml
/// classes = ["car", "pedestrian"]
///
/// [domains]
/// ids = ["source", "night"]
/// labeled = "source"
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalogs {
    pub classes: ClassCatalog,
    pub domains: DomainCatalog,
}

impl Catalogs {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("catalogs always serialize")
    }
}
