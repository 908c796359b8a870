//! Name-keyed store of per-dataset task parameters.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::classifier::TaskParams;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::param::{Module, Parameter};
use crate::tensor::Real;

/// Lifecycle stage of a model or of a registry entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Pretrained,
    Repurposed,
    Adapted,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrained => "pretrained",
            Stage::Repurposed => "repurposed",
            Stage::Adapted => "adapted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrained" => Some(Stage::Pretrained),
            "repurposed" => Some(Stage::Repurposed),
            "adapted" => Some(Stage::Adapted),
            _ => None,
        }
    }
}

impl core::fmt::Display for Stage {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEntry<T> {
    pub params: TaskParams<T>,
    pub spec: DatasetSpec,
    pub created_at: Stage,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Registry<T> {
    entries: BTreeMap<String, TaskEntry<T>>,
}

impl<T: Real> Registry<T> {
    pub fn new() -> Self {
        Registry { entries: BTreeMap::new() }
    }

    /// Creates Gaussian-initialized `E [C, D]`, `Q [K, D]` for `spec`.
    pub fn register_task(&mut self, spec: &DatasetSpec, dim: usize, seed: u64, stage: Stage) -> Result<&TaskParams<T>> {
        spec.validate()?;
        if self.entries.contains_key(&spec.name) {
            return Err(Error::DuplicateTask(spec.name.clone()));
        }
        let params = TaskParams::new(&spec.name, spec.channels, spec.classes, dim, spec.task_kind, seed)?;
        self.insert(TaskEntry { params, spec: spec.clone(), created_at: stage })?;
        Ok(&self.entries[&spec.name].params)
    }

    /// Inserts a fully formed entry (used when loading checkpoints).
    pub fn insert(&mut self, entry: TaskEntry<T>) -> Result<()> {
        let name = &entry.spec.name;
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateTask(name.clone()));
        }
        if entry.params.dataset_name != *name
            || entry.params.channels() != entry.spec.channels
            || entry.params.classes() != entry.spec.classes
        {
            return Err(Error::shape(
                "registry",
                format!(
                    "task `{}`: E/Q shapes {:?}/{:?} disagree with C={} K={}",
                    name,
                    entry.params.embeddings.shape(),
                    entry.params.queries.shape(),
                    entry.spec.channels,
                    entry.spec.classes
                ),
            ));
        }
        self.entries.insert(name.clone(), entry);
        Ok(())
    }

    pub fn get_task(&self, name: &str) -> Result<&TaskParams<T>> {
        self.entry(name).map(|e| &e.params)
    }

    pub fn get_task_mut(&mut self, name: &str) -> Result<&mut TaskParams<T>> {
        self.entries.get_mut(name).map(|e| &mut e.params).ok_or_else(|| Error::UnknownTask(String::from(name)))
    }

    pub fn entry(&self, name: &str) -> Result<&TaskEntry<T>> {
        self.entries.get(name).ok_or_else(|| Error::UnknownTask(String::from(name)))
    }

    pub fn remove(&mut self, name: &str) -> Result<TaskEntry<T>> {
        self.entries.remove(name).ok_or_else(|| Error::UnknownTask(String::from(name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(|k| k.as_str()).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &TaskEntry<T>> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<T: Real> Module<T> for Registry<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        for e in self.entries.values() {
            e.params.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for e in self.entries.values_mut() {
            e.params.visit_mut(f);
        }
    }
}
