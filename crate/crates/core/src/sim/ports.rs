use crate::planner::GroupRef;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PortRecord {
    pub opened: bool,
    pub published_name: Option<String>,
}

/// Ports opened by accepting groups, plus the name service they publish to.
/// Published names are visible to every process immediately.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PortRegistry {
    ports: BTreeMap<GroupRef, PortRecord>,
}

impl PortRegistry {
    pub fn service_name(group: GroupRef) -> String {
        match group {
            GroupRef::Source => "espsim-port-source".to_string(),
            GroupRef::Group(g) => format!("espsim-port-{g}"),
        }
    }

    pub fn open(&mut self, group: GroupRef) {
        self.ports.entry(group).or_default().opened = true;
    }

    pub fn publish(&mut self, group: GroupRef) {
        self.ports.entry(group).or_default().published_name = Some(Self::service_name(group));
    }

    /// Resolves a published service name to a usable port.
    pub fn lookup(&self, group: GroupRef) -> Option<&str> {
        self.ports
            .get(&group)
            .filter(|p| p.opened)
            .and_then(|p| p.published_name.as_deref())
    }

    pub fn get(&self, group: GroupRef) -> Option<&PortRecord> {
        self.ports.get(&group)
    }

    pub fn len(&self) -> usize {
        self.ports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ports.is_empty()
    }
}
