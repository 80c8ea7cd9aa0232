// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use spatial_cbm::bottleneck::ConceptMaps;
use spatial_cbm::explain::EditRecord;
use spatial_cbm::head::Prediction;

/// Cached forward pass plus the edit stack applied on top of it.
#[derive(Debug)]
pub struct Session {
    pub image_id: String,
    /// Unedited maps from the backbone pass.
    pub maps: ConceptMaps,
    pub original: Prediction,
    pub edits: Vec<EditRecord>,
    /// `(width, height)` of the uploaded image.
    pub image_dims: (u32, u32),
}

pub enum SessionLookup {
    Live(Arc<tokio::sync::Mutex<Session>>),
    Expired,
    Unknown,
}

struct Entry {
    session: Arc<tokio::sync::Mutex<Session>>,
    last_access: Instant,
}

#[derive(Default)]
struct Inner {
    live: HashMap<String, Entry>,
    tombstones: HashSet<String>,
    tombstone_order: VecDeque<String>,
}

/// Sessions expire after `ttl` without access; past `max_sessions` the
/// least recently used one is evicted. Expired and evicted ids answer
/// [`SessionLookup::Expired`] for a bounded while.
pub struct SessionStore {
    inner: Mutex<Inner>,
    ttl: Duration,
    max_sessions: usize,
}

const MAX_TOMBSTONES: usize = 4096;

impl Inner {
    fn bury(&mut self, id: String) {
        self.live.remove(&id);
        if self.tombstones.insert(id.clone()) {
            self.tombstone_order.push_back(id);
        }
        while self.tombstone_order.len() > MAX_TOMBSTONES {
            if let Some(old) = self.tombstone_order.pop_front() {
                self.tombstones.remove(&old);
            }
        }
    }

    fn sweep(&mut self, now: Instant, ttl: Duration) {
        let stale: Vec<String> =
            self.live.iter().filter(|(_, e)| now.duration_since(e.last_access) > ttl).map(|(k, _)| k.clone()).collect();
        for id in stale {
            self.bury(id);
        }
    }
}

impl SessionStore {
    pub fn new(ttl: Duration, max_sessions: usize) -> Self {
        Self { inner: Mutex::new(Inner::default()), ttl, max_sessions: max_sessions.max(1) }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn insert(&self, image_id: String, maps: ConceptMaps, original: Prediction, image_dims: (u32, u32)) -> String {
        let id = format!("{:032x}", rand::rng().random::<u128>());
        let now = Instant::now();
        let mut inner = self.lock();
        inner.sweep(now, self.ttl);
        while inner.live.len() >= self.max_sessions {
            let Some(oldest) = inner.live.iter().min_by_key(|(_, e)| e.last_access).map(|(k, _)| k.clone()) else {
                break;
            };
            tracing::debug!(session = %oldest, "evicting least recently used session");
            inner.bury(oldest);
        }
        let session = Session { image_id, maps, original, edits: Vec::new(), image_dims };
        inner.live.insert(id.clone(), Entry { session: Arc::new(tokio::sync::Mutex::new(session)), last_access: now });
        id
    }

    /// Looks up a session and refreshes its expiry.
    pub fn get(&self, id: &str) -> SessionLookup {
        let now = Instant::now();
        let mut inner = self.lock();
        inner.sweep(now, self.ttl);
        if let Some(e) = inner.live.get_mut(id) {
            e.last_access = now;
            return SessionLookup::Live(e.session.clone());
        }
        if inner.tombstones.contains(id) {
            SessionLookup::Expired
        } else {
            SessionLookup::Unknown
        }
    }

    pub fn len(&self) -> usize {
        self.lock().live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
