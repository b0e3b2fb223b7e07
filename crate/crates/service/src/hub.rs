//! Fan-out of stream messages to subscribers.
//!
//! Each client has an unbounded control queue and a bounded display queue.
//! A full display queue discards its oldest entry and counts the loss.
//! Messages are numbered under one lock, so every client sees a subsequence
//! of the same global order.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use tokio::sync::Notify;

use crate::messages::{Envelope, Message};

#[derive(Default)]
struct Queues {
    control: VecDeque<Envelope>,
    display: VecDeque<Envelope>,
    dropped: u64,
    closed: bool,
}

pub struct Client {
    pub id: u64,
    capacity: usize,
    queues: Mutex<Queues>,
    notify: Notify,
}

impl Client {
    fn push(&self, env: Envelope) {
        let mut q = self.queues.lock().expect("client queue");
        if env.message.is_display() {
            if q.display.len() == self.capacity {
                q.display.pop_front();
                q.dropped += 1;
            }
            q.display.push_back(env);
        } else {
            q.control.push_back(env);
        }
        drop(q);
        self.notify.notify_one();
    }

    /// Oldest queued message by sequence number, with the client's drop count
    /// filled into signal messages.
    pub fn try_next(&self) -> Option<Envelope> {
        let mut q = self.queues.lock().expect("client queue");
        let take_control = match (q.control.front(), q.display.front()) {
            (Some(c), Some(d)) => c.seq < d.seq,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => return None,
        };
        let mut env = if take_control { q.control.pop_front() } else { q.display.pop_front() }?;
        if let Message::Signal { dropped, .. } = &mut env.message {
            *dropped = q.dropped;
        }
        Some(env)
    }

    /// Waits for the next message; `None` once the hub closed this client.
    pub async fn next(&self) -> Option<Envelope> {
        loop {
            if let Some(e) = self.try_next() {
                return Some(e);
            }
            if self.queues.lock().expect("client queue").closed {
                return None;
            }
            self.notify.notified().await;
        }
    }

    pub fn dropped(&self) -> u64 {
        self.queues.lock().expect("client queue").dropped
    }

    pub fn queued(&self) -> (usize, usize) {
        let q = self.queues.lock().expect("client queue");
        (q.control.len(), q.display.len())
    }
}

pub struct Hub {
    start: Instant,
    capacity: usize,
    next_id: AtomicU64,
    /// Guards numbering as well as the client list.
    clients: Mutex<(u64, Vec<Arc<Client>>)>,
    /// Drops of clients that have since disconnected.
    past_drops: AtomicU64,
}

impl Hub {
    pub fn new(display_capacity: usize) -> Self {
        Self {
            start: Instant::now(),
            capacity: display_capacity.max(1),
            next_id: AtomicU64::new(1),
            clients: Mutex::new((0, Vec::new())),
            past_drops: AtomicU64::new(0),
        }
    }

    fn envelope(&self, seq: &mut u64, message: Message) -> Envelope {
        *seq += 1;
        Envelope { seq: *seq, t_ms: self.start.elapsed().as_secs_f64() * 1e3, message }
    }

    pub fn publish(&self, message: Message) {
        let mut g = self.clients.lock().expect("hub lock");
        let (seq, clients) = &mut *g;
        let env = self.envelope(seq, message);
        for c in clients.iter() {
            c.push(env.clone());
        }
    }

    /// Registers a client whose first message is `first`.
    pub fn subscribe(&self, first: Message) -> Arc<Client> {
        let client = Arc::new(Client {
            id: self.next_id.fetch_add(1, Ordering::Relaxed),
            capacity: self.capacity,
            queues: Mutex::new(Queues::default()),
            notify: Notify::new(),
        });
        let mut g = self.clients.lock().expect("hub lock");
        let (seq, clients) = &mut *g;
        client.push(self.envelope(seq, first));
        clients.push(client.clone());
        client
    }

    pub fn unsubscribe(&self, id: u64) {
        let mut g = self.clients.lock().expect("hub lock");
        if let Some(i) = g.1.iter().position(|c| c.id == id) {
            let c = g.1.remove(i);
            let mut q = c.queues.lock().expect("client queue");
            q.closed = true;
            self.past_drops.fetch_add(q.dropped, Ordering::Relaxed);
            drop(q);
            c.notify.notify_one();
        }
    }

    pub fn client_count(&self) -> usize {
        self.clients.lock().expect("hub lock").1.len()
    }

    /// Display messages dropped over the server's lifetime.
    pub fn total_dropped(&self) -> u64 {
        let live: u64 = self.clients.lock().expect("hub lock").1.iter().map(|c| c.dropped()).sum();
        live + self.past_drops.load(Ordering::Relaxed)
    }
}
