use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::mpsc;
use uuid::Uuid;

use crate::time::Timestamp;

/// One entry of the `/events` feed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessEvent {
    /// Strictly increasing per instance; lets clients detect gaps.
    pub seq: u64,
    #[serde(rename = "type")]
    pub kind: String,
    pub run_id: Option<Uuid>,
    pub data: Value,
    pub server_time: Timestamp,
}

/// Fan-out with one unbounded queue per subscriber, so a slow reader never
/// loses or reorders events and never blocks the writer.
#[derive(Debug, Default)]
pub struct EventBus {
    next_seq: u64,
    subs: Vec<mpsc::UnboundedSender<HarnessEvent>>,
}

impl EventBus {
    pub fn subscribe(&mut self) -> mpsc::UnboundedReceiver<HarnessEvent> {
        let (tx, rx) = mpsc::unbounded_channel();
        self.subs.push(tx);
        rx
    }

    pub fn subscriber_count(&self) -> usize {
        self.subs.len()
    }

    pub fn publish(&mut self, kind: &str, run_id: Option<Uuid>, data: Value, now: Timestamp) -> HarnessEvent {
        self.next_seq += 1;
        let ev = HarnessEvent { seq: self.next_seq, kind: kind.to_string(), run_id, data, server_time: now };
        self.subs.retain(|s| s.send(ev.clone()).is_ok());
        ev
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn every_subscriber_sees_every_event_in_order() {
        let mut bus = EventBus::default();
        let mut a = bus.subscribe();
        let mut b = bus.subscribe();
        for i in 0..5 {
            bus.publish("tick", None, json!(i), Timestamp(i));
        }
        drop(b.try_recv());
        let seqs: Vec<u64> = std::iter::from_fn(|| a.try_recv().ok()).map(|e| e.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3, 4, 5]);
        let rest: Vec<u64> = std::iter::from_fn(|| b.try_recv().ok()).map(|e| e.seq).collect();
        assert_eq!(rest, vec![2, 3, 4, 5]);
    }

    #[test]
    fn closed_subscribers_are_pruned() {
        let mut bus = EventBus::default();
        drop(bus.subscribe());
        bus.publish("x", None, Value::Null, Timestamp(0));
        assert_eq!(bus.subscriber_count(), 0);
    }
}
