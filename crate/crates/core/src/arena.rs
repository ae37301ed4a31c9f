//! Fixed-capacity activation arena simulating MCU SRAM.
//!
//! Every activation or scratch buffer the executors touch is a [`Region`]
//! handed out by an [`Arena`]. The arena enforces the byte budget, tracks the
//! live and peak byte counts and keeps an event log that can be dumped as
//! JSON lines. Weights are never charged here.

use std::collections::HashSet;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

use crate::error::{Error, Result};

// Region ids are unique process-wide so a handle from another arena is never
// mistaken for a live one.
static NEXT_REGION_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Alloc,
    Release,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AllocEvent {
    pub kind: EventKind,
    pub tag: String,
    pub bytes: usize,
    /// Live bytes after the event.
    pub live: usize,
    /// High-water mark after the event.
    pub peak: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArenaStats {
    pub budget_bytes: usize,
    pub live_bytes: usize,
    pub peak_bytes: usize,
    pub alloc_events: Vec<AllocEvent>,
}

/// A zero-initialized buffer accounted against an arena.
#[derive(Debug)]
pub struct Region {
    id: u64,
    tag: String,
    data: Vec<i8>,
}

impl Region {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [i8] {
        &mut self.data
    }
}

#[derive(Debug)]
pub struct Arena {
    budget: usize,
    live: usize,
    peak: usize,
    window_peak: usize,
    live_ids: HashSet<u64>,
    events: Vec<AllocEvent>,
}

impl Arena {
    pub fn new(budget_bytes: usize) -> Self {
        Self {
            budget: budget_bytes,
            live: 0,
            peak: 0,
            window_peak: 0,
            live_ids: HashSet::new(),
            events: Vec::new(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn live_bytes(&self) -> usize {
        self.live
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak
    }

    pub fn alloc(&mut self, bytes: usize, tag: &str) -> Result<Region> {
        if bytes == 0 {
            return Err(Error::ZeroSizedAlloc(tag.to_string()));
        }
        if self.live + bytes > self.budget {
            return Err(Error::OutOfMemory {
                tag: tag.to_string(),
                requested: bytes,
                live: self.live,
                budget: self.budget,
            });
        }
        self.live += bytes;
        self.peak = self.peak.max(self.live);
        self.window_peak = self.window_peak.max(self.live);
        let id = NEXT_REGION_ID.fetch_add(1, Ordering::Relaxed);
        self.live_ids.insert(id);
        self.events.push(AllocEvent {
            kind: EventKind::Alloc,
            tag: tag.to_string(),
            bytes,
            live: self.live,
            peak: self.peak,
        });
        Ok(Region {
            id,
            tag: tag.to_string(),
            data: vec![0; bytes],
        })
    }

    /// Returns the region's bytes to the budget. The handle stays usable as a
    /// plain buffer, but a second release is rejected.
    pub fn release(&mut self, region: &Region) -> Result<()> {
        if !self.live_ids.remove(&region.id) {
            return Err(Error::DoubleRelease(region.id));
        }
        self.live -= region.len();
        self.events.push(AllocEvent {
            kind: EventKind::Release,
            tag: region.tag.clone(),
            bytes: region.len(),
            live: self.live,
            peak: self.peak,
        });
        Ok(())
    }

    /// Consumes and releases a region.
    pub fn free(&mut self, region: Region) -> Result<()> {
        self.release(&region)
    }

    /// Starts a measurement window: the window peak restarts at the current
    /// live byte count.
    pub fn begin_window(&mut self) {
        self.window_peak = self.live;
    }

    /// Highest live byte count since the last [`Arena::begin_window`].
    pub fn window_peak(&self) -> usize {
        self.window_peak
    }

    pub fn events(&self) -> &[AllocEvent] {
        &self.events
    }

    pub fn stats(&self) -> ArenaStats {
        ArenaStats {
            budget_bytes: self.budget,
            live_bytes: self.live,
            peak_bytes: self.peak,
            alloc_events: self.events.clone(),
        }
    }

    /// One JSON object per event: `{"kind","tag","bytes","live","peak"}`.
    pub fn write_trace<W: Write>(&self, mut sink: W) -> Result<()> {
        for ev in &self.events {
            let line = serde_json::to_string(ev).map_err(|e| Error::Io(e.to_string()))?;
            writeln!(sink, "{line}")?;
        }
        Ok(())
    }
}

/// Replays an event log and returns the maximum live byte count it implies.
pub fn replay_peak(events: &[AllocEvent]) -> usize {
    let mut live = 0usize;
    let mut peak = 0usize;
    for ev in events {
        match ev.kind {
            EventKind::Alloc => live += ev.bytes,
            EventKind::Release => live -= ev.bytes,
        }
        peak = peak.max(live);
    }
    peak
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn over_budget_is_oom() {
        let mut a = Arena::new(100);
        let _r = a.alloc(60, "a").unwrap();
        let err = a.alloc(50, "b").unwrap_err();
        assert_eq!(
            err,
            Error::OutOfMemory {
                tag: "b".into(),
                requested: 50,
                live: 60,
                budget: 100
            }
        );
        assert!(err.is_oom());
        assert_eq!(a.live_bytes(), 60);
    }

    #[test]
    fn release_then_fits() {
        let mut a = Arena::new(100);
        let r = a.alloc(60, "a").unwrap();
        a.release(&r).unwrap();
        let _s = a.alloc(50, "b").unwrap();
        assert_eq!(a.stats().peak_bytes, 60);
        assert_eq!(a.live_bytes(), 50);
    }

    #[test]
    fn double_release_rejected() {
        let mut a = Arena::new(10);
        let r = a.alloc(4, "a").unwrap();
        a.release(&r).unwrap();
        assert_eq!(a.release(&r), Err(Error::DoubleRelease(r.id())));
        assert_eq!(a.live_bytes(), 0);
    }

    #[test]
    fn foreign_region_rejected() {
        let mut a = Arena::new(10);
        let mut b = Arena::new(10);
        let _ra = a.alloc(4, "a").unwrap();
        let rb = b.alloc(4, "b").unwrap();
        assert!(a.release(&rb).is_err());
        assert_eq!(a.live_bytes(), 4);
        b.release(&rb).unwrap();
    }

    #[test]
    fn zero_sized_alloc_rejected() {
        let mut a = Arena::new(10);
        assert!(matches!(a.alloc(0, "z"), Err(Error::ZeroSizedAlloc(_))));
    }

    #[test]
    fn fresh_and_single_alloc_stats() {
        let mut a = Arena::new(1000);
        assert_eq!(a.stats().peak_bytes, 0);
        let r = a.alloc(37, "k").unwrap();
        assert_eq!(a.stats().peak_bytes, 37);
        assert!(r.as_slice().iter().all(|&b| b == 0));
    }

    #[test]
    fn release_all_returns_to_zero() {
        let mut a = Arena::new(1000);
        let rs: Vec<_> = (1..=5).map(|k| a.alloc(k * 10, "r").unwrap()).collect();
        for r in rs.iter().rev() {
            a.release(r).unwrap();
        }
        assert_eq!(a.live_bytes(), 0);
        assert_eq!(a.peak_bytes(), 150);
    }

    #[test]
    fn mlp_tile_sequence_peak() {
        // s=128, t=4, d=128: x stays live, each tile needs t*4d + t*d.
        let (s, t, d) = (128usize, 4usize, 128usize);
        let mut a = Arena::new(1 << 20);
        let x = a.alloc(s * d, "x").unwrap();
        for _ in 0..s / t {
            let h = a.alloc(t * 4 * d, "mlp.hidden").unwrap();
            let o = a.alloc(t * d, "mlp.out").unwrap();
            a.free(o).unwrap();
            a.free(h).unwrap();
        }
        a.free(x).unwrap();
        assert_eq!(a.peak_bytes(), 18_944);
    }

    #[test]
    fn window_peak_restarts_at_live() {
        let mut a = Arena::new(1000);
        let x = a.alloc(100, "x").unwrap();
        let y = a.alloc(300, "y").unwrap();
        a.free(y).unwrap();
        a.begin_window();
        assert_eq!(a.window_peak(), 100);
        let z = a.alloc(50, "z").unwrap();
        a.free(z).unwrap();
        assert_eq!(a.window_peak(), 150);
        assert_eq!(a.peak_bytes(), 400);
        a.free(x).unwrap();
    }

    #[test]
    fn trace_is_json_lines() {
        let mut a = Arena::new(100);
        let r = a.alloc(8, "q_tile").unwrap();
        a.free(r).unwrap();
        let mut buf = Vec::new();
        a.write_trace(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(v["kind"], "alloc");
        assert_eq!(v["tag"], "q_tile");
        assert_eq!(v["bytes"], 8);
        assert_eq!(v["live"], 8);
        assert_eq!(v["peak"], 8);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(v["kind"], "release");
        assert_eq!(v["live"], 0);
    }

    proptest! {
        // Random LIFO push/pop traces: the reported peak equals the replayed
        // maximum and never exceeds the budget.
        #[test]
        fn peak_matches_replay(ops in prop::collection::vec((any::<bool>(), 1usize..64), 1..200)) {
            let mut a = Arena::new(512);
            let mut stack: Vec<Region> = Vec::new();
            let mut last_peak = 0;
            for (push, bytes) in ops {
                if push || stack.is_empty() {
                    if let Ok(r) = a.alloc(bytes, "p") { stack.push(r); }
                } else {
                    let r = stack.pop().unwrap();
                    a.free(r).unwrap();
                }
                let st = a.stats();
                prop_assert!(st.live_bytes <= st.peak_bytes && st.peak_bytes <= st.budget_bytes);
                prop_assert!(st.peak_bytes >= last_peak);
                last_peak = st.peak_bytes;
            }
            prop_assert_eq!(replay_peak(a.events()), a.peak_bytes());
        }
    }
}
