use std::collections::BTreeMap;

use crate::model::Timestamp;

/// Virtual clock plus its pending events. Events at equal times fire in
/// insertion order; time never moves backwards.
#[derive(Clone, Debug)]
pub struct SimClock<E> {
    now: Timestamp,
    seq: u64,
    pending: BTreeMap<(Timestamp, u64), E>,
}

impl<E> Default for SimClock<E> {
    fn default() -> Self {
        SimClock {
            now: Timestamp::ZERO,
            seq: 0,
            pending: BTreeMap::new(),
        }
    }
}

impl<E> SimClock<E> {
    pub fn now(&self) -> Timestamp {
        self.now
    }

    /// Schedules `event` at `at`, or now if `at` is in the past.
    pub fn schedule(&mut self, at: Timestamp, event: E) {
        let at = at.max(self.now);
        self.pending.insert((at, self.seq), event);
        self.seq += 1;
    }

    pub fn next_time(&self) -> Option<Timestamp> {
        self.pending.keys().next().map(|(t, _)| *t)
    }

    /// Removes the earliest event due at or before `until` and moves the
    /// clock to its time.
    pub fn pop_due(&mut self, until: Timestamp) -> Option<(Timestamp, E)> {
        let (&(t, seq), _) = self.pending.iter().next()?;
        if t > until {
            return None;
        }
        let e = self.pending.remove(&(t, seq)).expect("key just seen");
        self.now = t;
        Some((t, e))
    }

    /// Moves the clock forward to `until` (no-op if already past).
    pub fn settle(&mut self, until: Timestamp) {
        self.now = self.now.max(until);
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}
