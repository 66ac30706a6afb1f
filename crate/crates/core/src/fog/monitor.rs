use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{DropCode, DropReason};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Transportation,
    Processing,
    Acquisition,
    Storage,
    Leverage,
    Control,
}

impl Task {
    pub const ALL: [Task; 6] =
        [Task::Transportation, Task::Processing, Task::Acquisition, Task::Storage, Task::Leverage, Task::Control];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub task: Task,
    pub tuples_in: u64,
    pub tuples_out: u64,
    /// Keyed by the drop reason's display form, e.g. `wrong_attribute_value(lat)`.
    pub tuples_dropped: BTreeMap<String, u64>,
    pub alarms_emitted: u64,
    pub last_completed_window: Option<String>,
}

impl TaskStatus {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            tuples_in: 0,
            tuples_out: 0,
            tuples_dropped: BTreeMap::new(),
            alarms_emitted: 0,
            last_completed_window: None,
        }
    }

    pub fn dropped_total(&self) -> u64 {
        self.tuples_dropped.values().sum()
    }

    pub fn is_conserved(&self) -> bool {
        self.tuples_in == self.tuples_out + self.dropped_total()
    }

    pub fn drop(&mut self, reason: &DropReason) {
        *self.tuples_dropped.entry(reason.to_string()).or_insert(0) += 1;
    }

    pub fn drop_n(&mut self, key: impl Into<String>, n: u64) {
        if n > 0 {
            *self.tuples_dropped.entry(key.into()).or_insert(0) += n;
        }
    }

    /// Drops summed by code, ignoring field names.
    pub fn dropped_by_code(&self, code: DropCode) -> u64 {
        let prefix = code.to_string();
        self.tuples_dropped
            .iter()
            .filter(|(k, _)| k.as_str() == prefix || k.starts_with(&format!("{prefix}(")))
            .map(|(_, v)| v)
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct Monitor {
    tasks: BTreeMap<Task, TaskStatus>,
}

impl Default for Monitor {
    fn default() -> Self {
        Self { tasks: Task::ALL.iter().map(|t| (*t, TaskStatus::new(*t))).collect() }
    }
}

impl Monitor {
    pub fn task(&self, task: Task) -> &TaskStatus {
        &self.tasks[&task]
    }

    pub fn task_mut(&mut self, task: Task) -> &mut TaskStatus {
        self.tasks.get_mut(&task).expect("every task is tracked")
    }

    /// In the fixed order of [`Task::ALL`].
    pub fn snapshot(&self) -> Vec<TaskStatus> {
        Task::ALL.iter().map(|t| self.tasks[t].clone()).collect()
    }
}
