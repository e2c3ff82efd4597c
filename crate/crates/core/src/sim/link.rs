//! Discrete-event network between two instances.
//!
//! Side A keeps true time; side B's clock runs `skew_ms` ahead. Each message
//! is delayed by `mean ± jitter`, plus `asymmetry` on the A→B direction.
//! Ordered traffic stays FIFO per direction. A ping and its pong share one
//! jitter draw, which is what makes a symmetric link symmetric per exchange.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::mpsc::UnboundedReceiver;
use uuid::Uuid;

use super::{apply_event, default_setup, prepare_session, report, schedule, start_request, utterances, Latency, SimAction, SimError, SimReport, SimScript, Step, SIM_EPOCH};
use crate::analyzer::AnnotationFilter;
use crate::harness::link::LinkDriver;
use crate::harness::{AnnotationRequest, Engine, HarnessEvent};
use crate::ids::SeededIds;
use crate::session::Role;
use crate::sync::{ClockOffset, MsgType, PeerEvent, SyncEnvelope, SyncPeer};
use crate::time::Timestamp;

/// How long before the run the two instances connect.
pub const CONNECT_LEAD_MS: i64 = 5_000;
/// Delay between a participant tap and the observer's mark.
pub const OBSERVER_REACTION_MS: i64 = 250;
pub const OBSERVER_MARK_KEY: &str = "4";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

fn nonce(env: &SyncEnvelope) -> Option<u64> {
    env.body.get("nonce").and_then(Value::as_u64)
}

pub struct SimLink {
    latency: Latency,
    skew_ms: i64,
    drop_rate: f64,
    rng: ChaCha8Rng,
    order: u64,
    queue: BTreeMap<(Timestamp, u64), (Side, SyncEnvelope)>,
    probe_jitter: HashMap<(Side, u64), i64>,
    last_ordered: [Timestamp; 2],
    stats: LinkStats,
}

impl SimLink {
    pub fn new(latency: Latency, skew_ms: i64, seed: u64) -> Self {
        SimLink {
            latency,
            skew_ms,
            drop_rate: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: 0,
            queue: BTreeMap::new(),
            probe_jitter: HashMap::new(),
            last_ordered: [Timestamp(i64::MIN); 2],
            stats: LinkStats::default(),
        }
    }

    /// Loses this fraction of live-relay traffic (annotations and stats
    /// digests). Control messages always arrive.
    pub fn with_drop_rate(mut self, p: f64) -> Self {
        self.drop_rate = p.clamp(0.0, 1.0);
        self
    }

    pub fn local_time(&self, side: Side, true_time: Timestamp) -> Timestamp {
        match side {
            Side::A => true_time,
            Side::B => true_time + self.skew_ms,
        }
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    fn draw_jitter(&mut self) -> i64 {
        let j = self.latency.jitter_ms;
        if j == 0 {
            0
        } else {
            self.rng.random_range(-j..=j)
        }
    }

    pub fn send(&mut self, from: Side, env: SyncEnvelope, true_now: Timestamp) {
        self.stats.sent += 1;
        let to = from.other();
        let best_effort = matches!(env.msg_type, MsgType::AnnotationMsg | MsgType::StatsDigest);
        if best_effort && self.drop_rate > 0.0 && self.rng.random::<f64>() < self.drop_rate {
            self.stats.dropped += 1;
            return;
        }
        let jitter = match (env.msg_type, nonce(&env)) {
            (MsgType::Ping, Some(n)) => {
                let j = self.draw_jitter();
                self.probe_jitter.insert((from, n), j);
                j
            }
            (MsgType::Pong, Some(n)) => match self.probe_jitter.remove(&(to, n)) {
                Some(j) => j,
                None => self.draw_jitter(),
            },
            _ => self.draw_jitter(),
        };
        let asym = if from == Side::A { self.latency.asymmetry_ms } else { 0 };
        let mut arrival = true_now + (self.latency.mean_ms + jitter + asym);
        if !matches!(env.msg_type, MsgType::Ping | MsgType::Pong) {
            arrival = arrival.max(self.last_ordered[to.index()]);
            self.last_ordered[to.index()] = arrival;
        }
        self.order += 1;
        self.queue.insert((arrival, self.order), (to, env));
    }

    pub fn next_arrival(&self) -> Option<Timestamp> {
        self.queue.keys().next().map(|(t, _)| *t)
    }

    /// Removes the earliest delivery: (true arrival time, destination, envelope).
    pub fn pop(&mut self) -> Option<(Timestamp, Side, SyncEnvelope)> {
        let ((t, _), (to, env)) = self.queue.pop_first()?;
        self.stats.delivered += 1;
        Some((t, to, env))
    }
}

/// Connects two bare peers over a simulated link and lets the initial ping
/// rounds complete. Returns the estimate held by A (B minus A) and by B.
pub fn estimate_over_link(latency: Latency, skew_ms: i64, seed: u64) -> (Option<ClockOffset>, Option<ClockOffset>) {
    let mut link = SimLink::new(latency, skew_ms, seed);
    let mut peers = [SyncPeer::new("a", Role::Wizard, None), SyncPeer::new("b", Role::Observer, None)];
    let t0 = SIM_EPOCH;
    for side in [Side::A, Side::B] {
        let now = link.local_time(side, t0);
        let p = &mut peers[side.index()];
        let mut out = vec![p.hello(now)];
        p.begin_resync(now);
        out.extend((0..crate::sync::PING_SAMPLES).map(|_| p.ping(now)));
        for env in out {
            link.send(side, env, t0);
        }
    }
    while let Some((t, to, env)) = link.pop() {
        let now = link.local_time(to, t);
        let events = peers[to.index()].handle(env, now).unwrap_or_default();
        for ev in events {
            if let PeerEvent::Send(e) = ev {
                link.send(to, e, t);
            }
        }
    }
    (peers[0].offset(), peers[1].offset())
}

struct Node {
    side: Side,
    engine: Engine,
    driver: LinkDriver,
    rx: UnboundedReceiver<HarnessEvent>,
    gaps: u64,
}

impl Node {
    fn open(dir: &Path, seed: u64, role: Role, instance: &str, side: Side, now: Timestamp) -> Result<(Self, Uuid), SimError> {
        let mut engine = Engine::open(dir, Box::new(SeededIds::new(seed)))?;
        let rx = engine.subscribe();
        let sid = engine.create_session(default_setup(role, instance), now)?;
        let driver = LinkDriver::new(instance, role, (role != Role::Observer).then_some(sid));
        Ok((Node { side, engine, driver, rx, gaps: 0 }, sid))
    }

    /// Forwards whatever the engine published since the last call.
    fn flush(&mut self, link: &mut SimLink, true_now: Timestamp) {
        let local = link.local_time(self.side, true_now);
        while let Ok(ev) = self.rx.try_recv() {
            if ev.kind == "peer_gap" {
                self.gaps += 1;
            }
            for env in self.driver.on_local(&ev, local) {
                link.send(self.side, env, true_now);
            }
        }
        for env in self.driver.poll(local) {
            link.send(self.side, env, true_now);
        }
    }

    fn deliver(&mut self, link: &mut SimLink, env: SyncEnvelope, true_now: Timestamp) -> Result<(), SimError> {
        let local = link.local_time(self.side, true_now);
        for out in self.driver.on_remote(&mut self.engine, env, local)? {
            link.send(self.side, out, true_now);
        }
        self.flush(link, true_now);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub run_id: Uuid,
    pub wizard: SimReport,
    pub wizard_csv: String,
    pub observer_csv: String,
    pub offset_at_wizard: Option<ClockOffset>,
    pub offset_at_observer: Option<ClockOffset>,
    pub observer_marks: u64,
    pub gap_warnings: u64,
    pub link: LinkStats,
    pub converged: bool,
}

enum Action {
    Wizard(Step),
    ObserverMark,
    Stop,
}

/// Wizard (side A) runs the script while an observer (side B, skewed clock)
/// follows over a lossy link and marks every tap. After the final merge both
/// instances should export the same CSV.
pub fn paired_run(script: &SimScript, wizard_dir: &Path, observer_dir: &Path, drop_rate: f64) -> Result<PairedReport, SimError> {
    script.validate()?;
    let mut link = SimLink::new(script.latency, script.skew_ms, script.seed).with_drop_rate(drop_rate);
    let connect = SIM_EPOCH - CONNECT_LEAD_MS;
    let (mut wiz, wsid) = Node::open(wizard_dir, script.seed, Role::Wizard, "wizard", Side::A, connect)?;
    let (mut obs, osid) = Node::open(observer_dir, script.seed ^ 0x0b5e_12e1, Role::Observer, "observer", Side::B, link.local_time(Side::B, connect))?;
    let keys = prepare_session(&mut wiz.engine, wsid)?;
    prepare_session(&mut obs.engine, osid)?;
    for node in [&mut wiz, &mut obs] {
        while node.rx.try_recv().is_ok() {}
        let local = link.local_time(node.side, connect);
        for env in node.driver.connect(local) {
            link.send(node.side, env, connect);
        }
    }

    let streams = wiz.engine.session(wsid)?.config.recorded_streams();
    let mut plan: Vec<(i64, Action)> = schedule(script, &streams).into_iter().map(|(t, s)| (t, Action::Wizard(s))).collect();
    for e in &script.events {
        if matches!(e.action, SimAction::ParticipantTap { .. }) {
            plan.push((e.at_ms + OBSERVER_REACTION_MS, Action::ObserverMark));
        }
    }
    let end = script.duration_ms.max(1);
    plan.push((end, Action::Stop));
    // stable: equal times keep wizard steps before observer marks before stop
    plan.sort_by_key(|(t, a)| (*t, matches!(a, Action::ObserverMark) as u8 + 2 * matches!(a, Action::Stop) as u8));

    let mut run_id = None;
    let mut marks = 0u64;
    let mut steps = plan.into_iter().peekable();
    let mut started = false;
    loop {
        let step_at = steps.peek().map(|(t, _)| SIM_EPOCH + *t);
        let next_step = match (step_at, link.next_arrival()) {
            (None, None) => break,
            (Some(s), Some(d)) => s < d || (!started && s <= d),
            (Some(_), None) => true,
            (None, Some(_)) => false,
        };
        if !next_step {
            let (t, to, env) = link.pop().expect("peeked");
            let node = if to == Side::A { &mut wiz } else { &mut obs };
            node.deliver(&mut link, env, t)?;
            continue;
        }
        let (offset, action) = steps.next().expect("peeked");
        let now = SIM_EPOCH + offset;
        if !started {
            run_id = Some(wiz.engine.start_pilot(wsid, &start_request(script), SIM_EPOCH, None)?.id);
            started = true;
            wiz.flush(&mut link, SIM_EPOCH);
        }
        let rid = run_id.expect("started above");
        match action {
            Action::Wizard(Step::Frame(f)) => {
                let stream = f.stream_id().to_string();
                wiz.engine.media().ingest(&stream, f.into(), now).map_err(crate::harness::HarnessError::from)?;
            }
            Action::Wizard(Step::Event(e)) => apply_event(&mut wiz.engine, wsid, rid, &keys, &e, now)?,
            Action::ObserverMark => {
                let local = link.local_time(Side::B, now);
                let running = obs.engine.run(rid).map(|r| r.is_running()).unwrap_or(false);
                if running {
                    let req = AnnotationRequest { key: Some(OBSERVER_MARK_KEY.into()), event_time: Some(local), ..Default::default() };
                    obs.engine.record(rid, req, local)?;
                    marks += 1;
                }
                obs.flush(&mut link, now);
                continue;
            }
            Action::Stop => {
                let run = wiz.engine.stop_run(rid, now)?;
                let said = utterances(script, run.duration_ms().unwrap_or(0));
                if !said.is_empty() {
                    wiz.engine.attach_transcripts(rid, &said, now)?;
                }
            }
        }
        wiz.engine.tick(now);
        wiz.flush(&mut link, now);
    }

    let rid = run_id.expect("plan always holds a stop step");
    let wizard = report(&wiz.engine, script, rid, streams.len() as u64)?;
    let all = AnnotationFilter::default();
    let wizard_csv = wiz.engine.export_csv(rid, &all)?;
    let observer_csv = obs.engine.export_csv(rid, &all)?;
    Ok(PairedReport {
        run_id: rid,
        wizard,
        converged: wizard_csv == observer_csv,
        wizard_csv,
        observer_csv,
        offset_at_wizard: wiz.driver.peer().offset(),
        offset_at_observer: obs.driver.peer().offset(),
        observer_marks: marks,
        gap_warnings: wiz.gaps + obs.gaps,
        link: link.stats(),
    })
}
