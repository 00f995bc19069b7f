//! Name-keyed registries of interchangeable strategies.
//!
//! Retriever backends, combiner variants and datastore pruners are all
//! selected by name at runtime (from the CLI or an HTTP override). Each
//! family keeps a [`Registry`] of factories; the built-in entries are
//! registered by the family's `registry()` constructor and callers may add
//! their own before resolving names.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub struct Registry<F> {
    kind: &'static str,
    factories: BTreeMap<String, F>,
}

impl<F> Registry<F> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
        }
    }

    /// Registers `factory` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: impl Into<String>, factory: F) -> &mut Self {
        self.factories.insert(name.into(), factory);
        self
    }

    pub fn get(&self, name: &str) -> Result<&F> {
        self.factories
            .get(name)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().collect::<Vec<_>>().join(", "),
            })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}
