//! Ping/pong clock-offset estimation.

use serde::{Deserialize, Serialize};

use super::SyncError;
use crate::time::Timestamp;

/// One ping exchange. `t1`/`t4` are on the requester clock, `t2`/`t3` on the
/// responder clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PingSample {
    pub t1: Timestamp,
    pub t2: Timestamp,
    pub t3: Timestamp,
    pub t4: Timestamp,
}

impl PingSample {
    pub fn new(t1: i64, t2: i64, t3: i64, t4: i64) -> Self {
        PingSample { t1: Timestamp(t1), t2: Timestamp(t2), t3: Timestamp(t3), t4: Timestamp(t4) }
    }

    pub fn is_valid(&self) -> bool {
        self.t4 >= self.t1 && self.t3 >= self.t2
    }

    /// `((t2 − t1) + (t3 − t4)) / 2`, exact (half-millisecond resolution).
    pub fn offset_ms(&self) -> f64 {
        (self.t2.millis_since(self.t1) + self.t3.millis_since(self.t4)) as f64 / 2.0
    }

    /// `(t4 − t1) − (t3 − t2)`.
    pub fn rtt_ms(&self) -> i64 {
        self.t4.millis_since(self.t1) - self.t3.millis_since(self.t2)
    }
}

/// Responder clock minus requester clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockOffset {
    pub offset_ms: f64,
    pub rtt_ms: i64,
    pub sample_count: usize,
}

impl ClockOffset {
    pub const ZERO: ClockOffset = ClockOffset { offset_ms: 0.0, rtt_ms: 0, sample_count: 1 };

    pub fn fixed(offset_ms: i64) -> Self {
        ClockOffset { offset_ms: offset_ms as f64, rtt_ms: 0, sample_count: 1 }
    }

    /// Whole-millisecond correction applied to timestamps, rounded half away
    /// from zero.
    pub fn correction_ms(&self) -> i64 {
        self.offset_ms.round() as i64
    }

    /// The offset seen from the other side of the link.
    pub fn inverse(&self) -> Self {
        ClockOffset { offset_ms: -self.offset_ms, ..*self }
    }
}

/// Takes the offset of the minimum-RTT sample (earliest wins on ties).
pub fn estimate_offset(samples: &[PingSample]) -> Result<ClockOffset, SyncError> {
    let best = samples
        .iter()
        .filter(|s| s.is_valid())
        .min_by_key(|s| s.rtt_ms())
        .ok_or(SyncError::NoSamples)?;
    Ok(ClockOffset { offset_ms: best.offset_ms(), rtt_ms: best.rtt_ms().max(0), sample_count: samples.len() })
}
