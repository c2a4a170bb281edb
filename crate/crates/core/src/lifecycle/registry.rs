use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::moe::{LoraExpert, Router, TaskProjection};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(pub String);

impl TaskId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Trained,
    ClonedFrom(TaskId),
    ComposedOf(TaskId, TaskId),
}

/// Two inherited task experts blended per token by a 2-way router over the
/// gate input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedExpert {
    pub parents: [TaskId; 2],
    pub experts: [LoraExpert; 2],
    pub mixer: Router,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskExpert {
    Lora(LoraExpert),
    Composed(ComposedExpert),
}

impl TaskExpert {
    pub fn loras(&self) -> Vec<&LoraExpert> {
        match self {
            TaskExpert::Lora(l) => vec![l],
            TaskExpert::Composed(c) => c.experts.iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSlot {
    pub id: TaskId,
    pub router: Router,
    pub expert: TaskExpert,
    pub projection: TaskProjection,
    pub provenance: Provenance,
}

/// Ordered task slots. Order is the registration order and fixes the
/// accumulation order during joint training.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskRegistry {
    slots: Vec<TaskSlot>,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[TaskSlot] {
        &self.slots
    }

    pub(crate) fn slots_mut(&mut self) -> &mut [TaskSlot] {
        &mut self.slots
    }

    pub fn ids(&self) -> impl Iterator<Item = &TaskId> {
        self.slots.iter().map(|s| &s.id)
    }

    pub fn index_of(&self, id: &TaskId) -> Result<usize> {
        self.slots
            .iter()
            .position(|s| &s.id == id)
            .ok_or_else(|| Error::UnknownTask(id.0.clone()))
    }

    pub fn get(&self, id: &TaskId) -> Result<&TaskSlot> {
        Ok(&self.slots[self.index_of(id)?])
    }

    pub fn contains(&self, id: &TaskId) -> bool {
        self.slots.iter().any(|s| &s.id == id)
    }

    pub fn insert(&mut self, slot: TaskSlot) -> Result<()> {
        if self.contains(&slot.id) {
            return Err(invalid(format!("task `{}` is already registered", slot.id)));
        }
        if let Provenance::ComposedOf(a, b) = &slot.provenance {
            if !self.contains(a) || !self.contains(b) {
                return Err(invalid(format!("composed task `{}` names a missing parent", slot.id)));
            }
        }
        self.slots.push(slot);
        Ok(())
    }
}
