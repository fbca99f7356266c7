//! In-simulation pub/sub: point-to-point, group and broadcast topics with
//! next-step delivery.
//!
//! Messages are fanned out into per-agent inboxes at publish time and handed
//! to the agent the next time it drains, which happens whenever the agent
//! plans (including the session-start roll of an offline agent). An agent
//! that is offline when a broadcast becomes due therefore picks it up on its
//! next login.

mod bridge;

pub use bridge::{BridgeConfig, BridgeError, MqttBridge};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Uid;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "snake_case")]
pub enum Topic {
    P2p(Uid),
    Group(String),
    Broadcast,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "uid", rename_all = "snake_case")]
pub enum Sender {
    Agent(Uid),
    System,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub msg_id: u64,
    pub topic: Topic,
    pub sender: Sender,
    pub body: String,
    pub sent_step: u64,
    pub deliver_step: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BusError {
    #[error("unknown group {0:?}")]
    UnknownGroup(String),
    #[error("unknown recipient {0}")]
    UnknownRecipient(Uid),
    #[error("unknown sender {0}")]
    UnknownSender(Uid),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MessageBus {
    next_id: u64,
    agents: BTreeSet<Uid>,
    groups: BTreeMap<String, BTreeSet<Uid>>,
    inboxes: BTreeMap<Uid, Vec<Message>>,
    published: u64,
}

impl MessageBus {
    pub fn new(agents: impl IntoIterator<Item = Uid>) -> Self {
        MessageBus {
            next_id: 1,
            agents: agents.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn set_group(&mut self, gid: impl Into<String>, members: impl IntoIterator<Item = Uid>) -> Result<(), BusError> {
        let members: BTreeSet<Uid> = members.into_iter().collect();
        if let Some(m) = members.iter().find(|m| !self.agents.contains(m)) {
            return Err(BusError::UnknownRecipient(*m));
        }
        self.groups.insert(gid.into(), members);
        Ok(())
    }

    pub fn groups(&self) -> &BTreeMap<String, BTreeSet<Uid>> {
        &self.groups
    }

    /// Queues a message for delivery at `sent_step + 1`.
    pub fn publish(&mut self, topic: Topic, sender: Sender, body: impl Into<String>, sent_step: u64) -> Result<Message, BusError> {
        if let Sender::Agent(uid) = sender {
            if !self.agents.contains(&uid) {
                return Err(BusError::UnknownSender(uid));
            }
        }
        let recipients: Vec<Uid> = match &topic {
            Topic::P2p(uid) => {
                if !self.agents.contains(uid) {
                    return Err(BusError::UnknownRecipient(*uid));
                }
                vec![*uid]
            }
            Topic::Group(gid) => self
                .groups
                .get(gid)
                .ok_or_else(|| BusError::UnknownGroup(gid.clone()))?
                .iter()
                .copied()
                .collect(),
            Topic::Broadcast => self.agents.iter().copied().collect(),
        };
        let msg = Message {
            msg_id: self.next_id,
            topic,
            sender,
            body: body.into(),
            sent_step,
            deliver_step: sent_step + 1,
        };
        self.next_id += 1;
        self.published += 1;
        for uid in recipients {
            // Ids and deliver steps both grow with publish order, so appending
            // keeps every inbox sorted by (deliver_step, msg_id).
            self.inboxes.entry(uid).or_default().push(msg.clone());
        }
        Ok(msg)
    }

    /// Removes and returns every message for `uid` due at or before `step`.
    pub fn drain(&mut self, uid: Uid, step: u64) -> Vec<Message> {
        let Some(inbox) = self.inboxes.get_mut(&uid) else {
            return Vec::new();
        };
        let due = inbox.partition_point(|m| m.deliver_step <= step);
        let out: Vec<Message> = inbox.drain(..due).collect();
        if inbox.is_empty() {
            self.inboxes.remove(&uid);
        }
        out
    }

    pub fn pending_for(&self, uid: Uid) -> usize {
        self.inboxes.get(&uid).map_or(0, Vec::len)
    }

    pub fn published_count(&self) -> u64 {
        self.published
    }
}
