//! Name-keyed factories for runtime-selectable strategies.

use crate::error::{Error, Result};

type Factory<T, A> = fn(&A) -> Result<Box<T>>;

pub struct Registry<T: ?Sized, A> {
    kind: &'static str,
    entries: Vec<(&'static str, Factory<T, A>)>,
}

impl<T: ?Sized, A> Registry<T, A> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Registers `factory` under `name`, replacing an earlier entry.
    pub fn register(&mut self, name: &'static str, factory: Factory<T, A>) -> &mut Self {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(e) => e.1 = factory,
            None => self.entries.push((name, factory)),
        }
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn create(&self, name: &str, args: &A) -> Result<Box<T>> {
        let (_, factory) = self
            .entries
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Unknown {
                kind: self.kind,
                name: name.to_string(),
            })?;
        factory(args)
    }
}
