//! Productive/unproductive time accounting and ETTR.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentClass {
    Productive,
    Detection,
    Localization,
    Failover,
    Recompute,
    CheckpointStall,
}

impl SegmentClass {
    pub const ALL: [SegmentClass; 6] = [
        SegmentClass::Productive,
        SegmentClass::Detection,
        SegmentClass::Localization,
        SegmentClass::Failover,
        SegmentClass::Recompute,
        SegmentClass::CheckpointStall,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start_ms: u64,
    pub end_ms: u64,
    pub class: SegmentClass,
}

impl Segment {
    pub fn duration_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }
}

/// Ordered, gap-free segments covering `[0, end)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsLedger {
    pub segments: Vec<Segment>,
}

impl MetricsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_segments(segments: Vec<Segment>) -> Self {
        MetricsLedger { segments }
    }

    pub fn end_ms(&self) -> u64 {
        self.segments.last().map_or(0, |s| s.end_ms)
    }

    /// Appends `[end, until)` as `class`, merging with a same-class tail.
    pub fn extend_to(&mut self, until_ms: u64, class: SegmentClass) {
        let start = self.end_ms();
        assert!(until_ms >= start, "ledger cannot move backwards ({until_ms} < {start})");
        if until_ms == start {
            return;
        }
        match self.segments.last_mut() {
            Some(last) if last.class == class => last.end_ms = until_ms,
            _ => self.segments.push(Segment {
                start_ms: start,
                end_ms: until_ms,
                class,
            }),
        }
    }

    pub fn is_partition(&self) -> bool {
        let mut cursor = 0;
        for s in &self.segments {
            if s.start_ms != cursor || s.end_ms <= s.start_ms {
                return false;
            }
            cursor = s.end_ms;
        }
        true
    }

    pub fn totals_ms(&self) -> BTreeMap<SegmentClass, u64> {
        let mut out: BTreeMap<SegmentClass, u64> = SegmentClass::ALL.iter().map(|&c| (c, 0)).collect();
        for s in &self.segments {
            *out.entry(s.class).or_default() += s.duration_ms();
        }
        out
    }

    pub fn productive_ms(&self) -> u64 {
        self.totals_ms()[&SegmentClass::Productive]
    }

    fn productive_prefix(&self) -> Vec<u64> {
        let mut acc = 0;
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        out.push(0);
        for s in &self.segments {
            if s.class == SegmentClass::Productive {
                acc += s.duration_ms();
            }
            out.push(acc);
        }
        out
    }

    /// Productive milliseconds within `[0, t)`.
    pub fn productive_until(&self, t_ms: u64) -> u64 {
        productive_until(&self.segments, &self.productive_prefix(), t_ms)
    }
}

fn productive_until(segments: &[Segment], prefix: &[u64], t_ms: u64) -> u64 {
    let idx = segments.partition_point(|s| s.end_ms <= t_ms);
    let mut total = prefix[idx];
    if let Some(s) = segments.get(idx) {
        if s.class == SegmentClass::Productive && s.start_ms < t_ms {
            total += t_ms - s.start_ms;
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EttrMode {
    Cumulative,
    Sliding { window_s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EttrPoint {
    pub t_s: f64,
    pub ettr: f64,
}

/// ETTR sampled at every segment boundary.
///
/// Cumulative: productive time in `[0, t)` over `t`. Sliding: productive time
/// in the trailing window over the window length, where the window is clipped
/// to `t` before one full window has elapsed. An empty ledger yields a single
/// point of 1.0 at t = 0.
pub fn ettr(ledger: &MetricsLedger, mode: EttrMode) -> Vec<EttrPoint> {
    if ledger.segments.is_empty() {
        return vec![EttrPoint { t_s: 0.0, ettr: 1.0 }];
    }
    let prefix = ledger.productive_prefix();
    let window_ms = match mode {
        EttrMode::Cumulative => None,
        EttrMode::Sliding { window_s } => Some((window_s * 1000.0).round() as u64),
    };
    ledger
        .segments
        .iter()
        .map(|s| {
            let t = s.end_ms;
            let (num, den) = match window_ms {
                None => (productive_until(&ledger.segments, &prefix, t), t),
                Some(w) => {
                    let from = t.saturating_sub(w);
                    let num = productive_until(&ledger.segments, &prefix, t)
                        - productive_until(&ledger.segments, &prefix, from);
                    (num, t - from)
                }
            };
            EttrPoint {
                t_s: t as f64 / 1000.0,
                ettr: num as f64 / den as f64,
            }
        })
        .collect()
}

pub fn final_ettr(ledger: &MetricsLedger) -> f64 {
    let end = ledger.end_ms();
    if end == 0 {
        1.0
    } else {
        ledger.productive_ms() as f64 / end as f64
    }
}
