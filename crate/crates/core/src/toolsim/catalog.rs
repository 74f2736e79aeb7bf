//! Placeholder media catalog that simulated outputs are sampled from.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::store::Modality;

const DEFAULT_CATALOG: &str = include_str!("../../data/catalog/catalog.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub modality: Modality,
    #[serde(default)]
    pub tags: Vec<String>,
    /// Relative to the directory holding the catalog manifest.
    pub path: String,
    /// Native attributes of the placeholder file; informational only.
    #[serde(default)]
    pub attributes: BTreeMap<String, Value>,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("malformed catalog manifest: {0}")]
    Parse(String),
    #[error("duplicate catalog entry `{0}`")]
    DuplicateId(String),
    #[error("catalog has no {0} entries")]
    MissingModality(Modality),
    #[error("placeholder file for `{id}` not found at {path}")]
    MissingFile { id: String, path: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MediaCatalog {
    pub entries: Vec<CatalogEntry>,
}

impl MediaCatalog {
    pub fn from_json(json: &str) -> Result<Self, CatalogError> {
        let catalog: MediaCatalog = serde_json::from_str(json).map_err(|e| CatalogError::Parse(e.to_string()))?;
        let mut seen = std::collections::HashSet::new();
        for e in &catalog.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(CatalogError::DuplicateId(e.id.clone()));
            }
        }
        Ok(catalog)
    }

    /// The shipped catalog (three placeholders per modality).
    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_CATALOG).expect("shipped catalog is valid")
    }

    /// Directory of the shipped placeholder files.
    pub fn builtin_dir() -> &'static Path {
        Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data/catalog"))
    }

    pub fn entries_for(&self, modality: Modality) -> Vec<&CatalogEntry> {
        self.entries.iter().filter(|e| e.modality == modality).collect()
    }

    /// Uniform draw over the entries of one modality.
    pub fn sample<R: Rng + ?Sized>(&self, modality: Modality, rng: &mut R) -> Option<&CatalogEntry> {
        let pool = self.entries_for(modality);
        if pool.is_empty() {
            return None;
        }
        Some(pool[rng.random_range(0..pool.len())])
    }

    pub fn ensure_covers(&self, modalities: impl IntoIterator<Item = Modality>) -> Result<(), CatalogError> {
        for m in modalities {
            if self.entries_for(m).is_empty() {
                return Err(CatalogError::MissingModality(m));
            }
        }
        Ok(())
    }

    pub fn verify_files(&self, base: &Path) -> Result<(), CatalogError> {
        for e in &self.entries {
            let p = base.join(&e.path);
            if !p.is_file() {
                return Err(CatalogError::MissingFile {
                    id: e.id.clone(),
                    path: p.display().to_string(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builtin_has_three_per_modality_and_files_exist() {
        let c = MediaCatalog::builtin();
        for m in [Modality::Text, Modality::Image, Modality::Video, Modality::Audio] {
            assert!(c.entries_for(m).len() >= 3, "{m}");
        }
        c.verify_files(MediaCatalog::builtin_dir()).unwrap();
    }

    #[test]
    fn sampling_is_seeded_and_uniform_over_matches() {
        let c = MediaCatalog::builtin();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| c.sample(Modality::Image, &mut rng).unwrap().id.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        let ids = draw(3);
        assert!(ids.iter().all(|id| id.starts_with("img-")));
        let mut distinct = ids.clone();
        distinct.sort();
        distinct.dedup();
        assert!(distinct.len() > 1);
    }

    #[test]
    fn rejects_duplicates_and_reports_gaps() {
        let json = r#"{"entries":[{"id":"a","modality":"Image","path":"x"},{"id":"a","modality":"Image","path":"y"}]}"#;
        assert!(matches!(
            MediaCatalog::from_json(json),
            Err(CatalogError::DuplicateId(_))
        ));
        let c = MediaCatalog::from_json(r#"{"entries":[]}"#).unwrap();
        assert!(c.ensure_covers([Modality::Video]).is_err());
    }
}
