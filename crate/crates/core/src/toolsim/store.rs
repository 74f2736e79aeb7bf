//! Simulated media assets and the per-episode asset store.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Image,
    Video,
    Audio,
}

impl Modality {
    pub fn is_visual(self) -> bool {
        matches!(self, Modality::Image | Modality::Video)
    }

    /// Attributes an asset of this modality must carry.
    pub fn required_attrs(self) -> &'static [Attr] {
        match self {
            Modality::Text => &[],
            Modality::Image => &[Attr::Width, Attr::Height],
            Modality::Video => &[Attr::Width, Attr::Height, Attr::Duration, Attr::Segments],
            Modality::Audio => &[Attr::Duration],
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Video => "video",
            Modality::Audio => "audio",
        };
        f.write_str(s)
    }
}

/// Physical attributes derivable by output rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attr {
    Width,
    Height,
    Duration,
    /// Number of distinct shots a video is made of.
    Segments,
}

impl Attr {
    pub fn from_name(name: &str) -> Option<Attr> {
        match name {
            "width" => Some(Attr::Width),
            "height" => Some(Attr::Height),
            "duration" => Some(Attr::Duration),
            "segments" => Some(Attr::Segments),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attr::Width => "width",
            Attr::Height => "height",
            Attr::Duration => "duration",
            Attr::Segments => "segments",
        }
    }

    /// Integral attributes must evaluate to whole numbers.
    pub fn is_integral(self) -> bool {
        !matches!(self, Attr::Duration)
    }
}

impl fmt::Display for Attr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub args_digest: String,
    #[serde(default)]
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaAsset {
    pub id: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    /// Seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_content: Option<String>,
    pub catalog_source: String,
    pub provenance: Provenance,
}

impl MediaAsset {
    pub fn attribute(&self, attr: Attr) -> Option<f64> {
        match attr {
            Attr::Width => self.width.map(f64::from),
            Attr::Height => self.height.map(f64::from),
            Attr::Duration => self.duration,
            Attr::Segments => self.segments.map(f64::from),
        }
    }

    /// Checks the per-modality attribute invariants.
    pub fn check(&self) -> Result<(), String> {
        let positive = |v: Option<f64>| v.is_some_and(|x| x > 0.0 && x.is_finite());
        match self.modality {
            Modality::Image => {
                if !positive(self.attribute(Attr::Width)) || !positive(self.attribute(Attr::Height)) {
                    return Err(format!("image {} needs positive width and height", self.id));
                }
                if self.duration.is_some() {
                    return Err(format!("image {} must not have a duration", self.id));
                }
            }
            Modality::Video | Modality::Audio => {
                if !positive(self.duration) {
                    return Err(format!("{} {} needs a positive duration", self.modality, self.id));
                }
            }
            Modality::Text => {}
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum StoreError {
    #[error("asset id `{0}` already exists in the store")]
    DuplicateId(String),
    #[error("invalid asset: {0}")]
    InvalidAsset(String),
}

/// Insertion-ordered map of the assets produced in one episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssetStore {
    prefix: String,
    next: u64,
    assets: IndexMap<String, MediaAsset>,
}

impl AssetStore {
    /// `prefix` namespaces minted ids so stores of different episodes never
    /// share an id.
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            next: 0,
            assets: IndexMap::new(),
        }
    }

    /// Reserves a fresh id. Ids are never handed out twice.
    pub fn mint_id(&mut self) -> String {
        loop {
            self.next += 1;
            let id = format!("asset_{}_{:03}", self.prefix, self.next);
            if !self.assets.contains_key(&id) {
                return id;
            }
        }
    }

    pub fn insert(&mut self, asset: MediaAsset) -> Result<(), StoreError> {
        if self.assets.contains_key(&asset.id) {
            return Err(StoreError::DuplicateId(asset.id));
        }
        asset.check().map_err(StoreError::InvalidAsset)?;
        self.assets.insert(asset.id.clone(), asset);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&MediaAsset> {
        self.assets.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.assets.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MediaAsset> {
        self.assets.values()
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}
