//! Simulator message bus: mailboxes keyed by opaque channel ids, plus the
//! trace of everything that crossed the bus or the ledger boundary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::board::OrderId;
use crate::codec;
use crate::mixing::RoundId;
use crate::transactions::{EnergyFinancialTx, OutputRef};
use crate::types::{Address, Asset, ChannelId, ProsumerId, Timestep, TxId};

/// Buyer's offer to take an ask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub ask: OrderId,
    pub eca: OutputRef,
    pub fa: Vec<OutputRef>,
    pub epa_to: Address,
    pub change_to: Address,
    pub reply: ChannelId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Message {
    Propose(Proposal),
    /// Settlement carrying the seller's input signature.
    Accept { ask: OrderId, tx: EnergyFinancialTx },
    Reject { ask: OrderId },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Propose(_) => "propose",
            Message::Accept { .. } => "accept",
            Message::Reject { .. } => "reject",
        }
    }
}

/// Who produced a submission, as ground truth for the checkers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "class", content = "detail")]
pub enum Label {
    Honest,
    /// Must be rejected.
    Adversarial(String),
    /// Members of one race group spend a common output; exactly one may win.
    Race(u64),
}

impl Label {
    pub fn adversarial(kind: &str) -> Label {
        Label::Adversarial(kind.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum TraceEvent {
    Submit { tick: Timestep, proposal: u64, tx: TxId, kind: String, label: Label },
    Outcome { tick: Timestep, proposal: u64, tx: TxId, accepted: bool, seq: Option<u64>, codes: Vec<String>, label: Label },
    Message { tick: Timestep, channel: ChannelId, kind: String, bytes: usize },
    Mix { tick: Timestep, round: RoundId, action: String, denomination: Asset, joined: usize, tx: Option<TxId> },
    Meter { tick: Timestep, prosumer: ProsumerId, result: String, label: Label },
    Board { tick: Timestep, action: String, result: String, label: Label },
    Payment { tick: Timestep, prosumer: ProsumerId, amount: crate::fixed::Amount },
}

#[derive(Debug, Clone)]
struct InFlight {
    deliver_at: Timestep,
    channel: ChannelId,
    msg: Message,
}

#[derive(Debug, Clone, Default)]
pub struct Bus {
    latency: u64,
    in_flight: Vec<InFlight>,
    mailboxes: BTreeMap<ChannelId, Vec<Message>>,
    trace: Vec<TraceEvent>,
}

impl Bus {
    pub fn new(latency: u64) -> Self {
        Bus { latency, ..Bus::default() }
    }

    /// Queues `msg` for `channel`; the trace keeps only size and kind.
    pub fn send(&mut self, now: Timestep, channel: ChannelId, msg: Message) {
        self.trace.push(TraceEvent::Message {
            tick: now,
            channel,
            kind: msg.kind().to_string(),
            bytes: codec::encode(&msg).len(),
        });
        self.in_flight.push(InFlight { deliver_at: now.plus(self.latency), channel, msg });
    }

    /// Moves messages due by `now` into their mailboxes, in send order.
    pub fn deliver(&mut self, now: Timestep) {
        let (due, rest): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.in_flight).into_iter().partition(|m| m.deliver_at <= now);
        self.in_flight = rest;
        for m in due {
            self.mailboxes.entry(m.channel).or_default().push(m.msg);
        }
    }

    pub fn take(&mut self, channel: &ChannelId) -> Vec<Message> {
        self.mailboxes.remove(channel).unwrap_or_default()
    }

    pub fn record(&mut self, event: TraceEvent) {
        self.trace.push(event);
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }
}
