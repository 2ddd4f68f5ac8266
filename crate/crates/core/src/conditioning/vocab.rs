use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Modality,
    Organ,
    Category,
    Augmentation,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::Modality,
        Role::Organ,
        Role::Category,
        Role::Augmentation,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Modality => "modality",
            Role::Organ => "organ",
            Role::Category => "category",
            Role::Augmentation => "augmentation",
        }
    }

    fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Closed token set, one list per role. Token ids are assigned in role order
/// (modality, organ, category, augmentation), then file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub modality: Vec<String>,
    pub organ: Vec<String>,
    pub category: Vec<String>,
    pub augmentation: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self {
            modality: owned(&["CT", "MR", "US"]),
            organ: owned(&["Ellipse", "Blob", "Ring", "Polygon"]),
            category: owned(&["Normal", "Inclusion", "Rim Thickening"]),
            augmentation: owned(&[
                "enhanced contrast",
                "high resolution",
                "low noise",
                "sharp detail",
            ]),
        }
    }
}

impl Vocabulary {
    pub fn new(
        modality: Vec<String>,
        organ: Vec<String>,
        category: Vec<String>,
        augmentation: Vec<String>,
    ) -> Result<Self> {
        let v = Self {
            modality,
            organ,
            category,
            augmentation,
        };
        v.validate()?;
        Ok(v)
    }

    fn validate(&self) -> Result<()> {
        for role in [Role::Modality, Role::Organ, Role::Category] {
            if self.tokens(role).is_empty() {
                return Err(Error::InvalidConfig(format!("vocabulary has no {role} tokens")));
            }
        }
        for role in Role::ALL {
            let tokens = self.tokens(role);
            for (i, t) in tokens.iter().enumerate() {
                if t.trim().is_empty() || t.trim() != t || t.starts_with('[') {
                    return Err(Error::InvalidConfig(format!("malformed {role} token {t:?}")));
                }
                if tokens[..i].contains(t) {
                    return Err(Error::InvalidConfig(format!("duplicate {role} token {t:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn tokens(&self, role: Role) -> &[String] {
        match role {
            Role::Modality => &self.modality,
            Role::Organ => &self.organ,
            Role::Category => &self.category,
            Role::Augmentation => &self.augmentation,
        }
    }

    pub fn len(&self) -> usize {
        Role::ALL.iter().map(|r| self.tokens(*r).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global row index of a token in the embedding table.
    pub fn id(&self, role: Role, token: &str) -> Result<usize> {
        let mut offset = 0;
        for r in Role::ALL {
            if r == role {
                return self
                    .tokens(r)
                    .iter()
                    .position(|t| t == token)
                    .map(|p| offset + p)
                    .ok_or_else(|| Error::Vocabulary {
                        role: role.to_string(),
                        token: token.to_string(),
                    });
            }
            offset += self.tokens(r).len();
        }
        unreachable!()
    }

    /// Text form: a `[role]` header line followed by one token per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for role in Role::ALL {
            s.push_str(&format!("[{role}]\n"));
            for t in self.tokens(role) {
                s.push_str(t);
                s.push('\n');
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut v = Vocabulary {
            modality: vec![],
            organ: vec![],
            category: vec![],
            augmentation: vec![],
        };
        let mut current: Option<Role> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(Role::parse(name.trim()).ok_or_else(|| {
                    Error::InvalidConfig(format!("line {}: unknown role header {line}", lineno + 1))
                })?);
                continue;
            }
            let role = current.ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: token before any role header", lineno + 1))
            })?;
            match role {
                Role::Modality => v.modality.push(line.to_string()),
                Role::Organ => v.organ.push(line.to_string()),
                Role::Category => v.category.push(line.to_string()),
                Role::Augmentation => v.augmentation.push(line.to_string()),
            }
        }
        v.validate()?;
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_hash() {
        let v = Vocabulary::default();
        let back = Vocabulary::parse(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.hash(), back.hash());
        let mut other = v.clone();
        other.augmentation.pop();
        assert_ne!(v.hash(), other.hash());
    }

    #[test]
    fn ids_are_global_and_ordered() {
        let v = Vocabulary::default();
        assert_eq!(v.id(Role::Modality, "CT").unwrap(), 0);
        assert_eq!(v.id(Role::Organ, "Ellipse").unwrap(), 3);
        assert_eq!(v.id(Role::Augmentation, "enhanced contrast").unwrap(), 10);
        match v.id(Role::Organ, "Spleen") {
            Err(Error::Vocabulary { token, .. }) => assert_eq!(token, "Spleen"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors() {
        assert!(Vocabulary::parse("CT\n").is_err());
        assert!(Vocabulary::parse("[shape]\nx\n").is_err());
        assert!(Vocabulary::parse("[modality]\nCT\nCT\n[organ]\na\n[category]\nb\n").is_err());
        assert!(Vocabulary::parse("[modality]\nCT\n[organ]\na\n").is_err());
    }
}
