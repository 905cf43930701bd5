//! Name-keyed registry of strategy objects.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::{GeodeError, Result};

/// Strategies of one family, looked up by their registered name.
pub struct Registry<S: ?Sized> {
    family: &'static str,
    entries: BTreeMap<String, Arc<S>>,
}

impl<S: ?Sized> Registry<S> {
    pub fn new(family: &'static str) -> Self {
        Self {
            family,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, strategy: Arc<S>) -> &mut Self {
        self.entries.insert(name.into(), strategy);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<S>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            GeodeError::config(
                self.family,
                format!(
                    "unknown {} `{name}` (known: {})",
                    self.family,
                    self.names().collect::<Vec<_>>().join(", ")
                ),
            )
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}
