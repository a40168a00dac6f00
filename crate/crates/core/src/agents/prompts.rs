//! Versioned instruction texts, one plain-text asset per role and version.
//! The bundled `v1` set is compiled in; a directory laid out as
//! `<role>/<version>.txt` can override it at run time.

use std::collections::BTreeMap;
use std::path::Path;

use super::Role;

pub const DEFAULT_VERSION: &str = "v1";

const BUNDLED: [(Role, &str); 6] = [
    (
        Role::Decomposer,
        include_str!("../../assets/prompts/decomposer/v1.txt"),
    ),
    (
        Role::Descriptor,
        include_str!("../../assets/prompts/descriptor/v1.txt"),
    ),
    (
        Role::Perceptor,
        include_str!("../../assets/prompts/perceptor/v1.txt"),
    ),
    (
        Role::Thinker,
        include_str!("../../assets/prompts/thinker/v1.txt"),
    ),
    (
        Role::Reflector,
        include_str!("../../assets/prompts/reflector/v1.txt"),
    ),
    (
        Role::SingleAgent,
        include_str!("../../assets/prompts/single_agent/v1.txt"),
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub version: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptLibrary {
    prompts: BTreeMap<Role, Prompt>,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        Self::bundled()
    }
}

impl PromptLibrary {
    pub fn bundled() -> Self {
        let prompts = BUNDLED
            .iter()
            .map(|(r, t)| {
                (
                    *r,
                    Prompt {
                        version: DEFAULT_VERSION.into(),
                        text: t.to_string(),
                    },
                )
            })
            .collect();
        Self { prompts }
    }

    /// Loads `<dir>/<role>/<version>.txt` for every role that has one; other
    /// roles keep the bundled text.
    pub fn load_dir(dir: &Path, version: &str) -> std::io::Result<Self> {
        let mut lib = Self::bundled();
        for role in Role::ALL {
            let path = dir.join(role.as_str()).join(format!("{version}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path)?;
                lib.prompts.insert(
                    role,
                    Prompt {
                        version: version.into(),
                        text,
                    },
                );
            }
        }
        Ok(lib)
    }

    pub fn get(&self, role: Role) -> &Prompt {
        &self.prompts[&role]
    }
}
