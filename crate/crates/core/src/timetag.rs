//! Binary time-tag stream format and trigger segmentation.
//!
//! Detectors and the laser trigger produce a single merged stream of
//! `(channel, timestamp)` records. On disk the stream is a fixed 32-byte
//! header followed by packed 16-byte records, everything little-endian:
//!
//! ```text
//! header: magic "TTG1" | version u16 | reserved u16
//!         | resolution_ps u64 | pulse_period_ps u64 | record_count u64
//! record: channel u16 | flags u16 | reserved u32 | timestamp_ps u64
//! ```
//!
//! Timestamps are picoseconds from stream start and must be non-decreasing.
//! [`split_by_trigger`] regroups a decoded stream into per-pulse cycles:
//! each detection is assigned to the most recent preceding trigger and
//! carries its trigger-relative arrival time, which is what the gating
//! stage consumes.

use thiserror::Error;

/// Stream magic, first four bytes of every file.
pub const MAGIC: [u8; 4] = *b"TTG1";
/// Format version written by `encode_stream` and required by `decode_stream`.
pub const FORMAT_VERSION: u16 = 1;
/// Encoded sizes, bytes.
pub const HEADER_LEN: usize = 32;
pub const RECORD_LEN: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StreamError {
    #[error("bad magic {0:?}, expected {MAGIC:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("stream truncated at byte {offset}: {expected} bytes required for {records} records, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
        records: u64,
    },
    #[error("{0} trailing bytes after last record")]
    TrailingBytes(usize),
    #[error("invalid channel {raw} in record at byte {offset}")]
    InvalidChannel { raw: u16, offset: usize },
    #[error("records not sorted by timestamp: violation at index {0}")]
    Unsorted(usize),
    #[error("stream contains no trigger events")]
    NoTrigger,
}

/// Hardware channel of a time-tag record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum Channel {
    /// Laser trigger output; defines pulse cycles.
    Trigger = 0,
    /// SPAD watching the upconverted signal beam.
    Signal = 1,
    /// SPAD watching the upconverted idler beam.
    Idler = 2,
}

impl Channel {
    pub fn from_u16(raw: u16) -> Option<Channel> {
        match raw {
            0 => Some(Channel::Trigger),
            1 => Some(Channel::Signal),
            2 => Some(Channel::Idler),
            _ => None,
        }
    }

    #[inline]
    pub fn as_u16(self) -> u16 {
        self as u16
    }
}

/// One detection or trigger event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeTagRecord {
    pub channel: Channel,
    /// Picoseconds from stream start.
    pub timestamp_ps: u64,
}

/// Stream metadata. `record_count` is filled in by [`encode_stream`] from
/// the actual record list; the value on an input header is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u16,
    /// Timestamp resolution in picoseconds.
    pub resolution_ps: u64,
    /// Nominal trigger spacing in picoseconds.
    pub pulse_period_ps: u64,
    pub record_count: u64,
}

impl StreamHeader {
    /// Header at the native 1 ps resolution.
    pub fn new(pulse_period_ps: u64) -> StreamHeader {
        StreamHeader {
            version: FORMAT_VERSION,
            resolution_ps: 1,
            pulse_period_ps,
            record_count: 0,
        }
    }
}

/// All events belonging to one laser pulse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PulseCycle {
    /// Absolute timestamp of the trigger that opened this cycle.
    pub trigger_ps: u64,
    /// Non-trigger events, in arrival order, with trigger-relative times.
    pub events: Vec<CycleEvent>,
}

/// A detection inside one cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CycleEvent {
    pub channel: Channel,
    /// Arrival time relative to the cycle trigger, picoseconds.
    pub relative_ps: u64,
}

/// Result of [`split_by_trigger`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitStream {
    pub cycles: Vec<PulseCycle>,
    /// Detections that arrived before the first trigger; they belong to no
    /// cycle and are dropped, but the count is preserved for accounting.
    pub discarded_before_first_trigger: usize,
}

/// Serializes a record list. Timestamps must be non-decreasing; the header's
/// `record_count` is replaced by `records.len()`.
pub fn encode_stream(
    header: &StreamHeader,
    records: &[TimeTagRecord],
) -> Result<Vec<u8>, StreamError> {
    for (i, pair) in records.windows(2).enumerate() {
        if pair[1].timestamp_ps < pair[0].timestamp_ps {
            return Err(StreamError::Unsorted(i + 1));
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * records.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&header.version.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&header.resolution_ps.to_le_bytes());
    out.extend_from_slice(&header.pulse_period_ps.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for rec in records {
        out.extend_from_slice(&rec.channel.as_u16().to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes()); // flags
        out.extend_from_slice(&0u32.to_le_bytes()); // reserved
        out.extend_from_slice(&rec.timestamp_ps.to_le_bytes());
    }
    Ok(out)
}

/// Parses a byte stream produced by [`encode_stream`]. The byte length must
/// match the record count claimed by the header exactly.
pub fn decode_stream(bytes: &[u8]) -> Result<(StreamHeader, Vec<TimeTagRecord>), StreamError> {
    if bytes.len() < HEADER_LEN {
        return Err(StreamError::Truncated {
            offset: bytes.len(),
            expected: HEADER_LEN,
            actual: bytes.len(),
            records: 0,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(StreamError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(StreamError::UnsupportedVersion(version));
    }
    let resolution_ps = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let pulse_period_ps = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let record_count = u64::from_le_bytes(bytes[24..32].try_into().unwrap());

    let expected = HEADER_LEN + RECORD_LEN * record_count as usize;
    if bytes.len() < expected {
        // Report where the intact prefix ends: the start of the first
        // record that is missing or incomplete.
        let whole = (bytes.len() - HEADER_LEN) / RECORD_LEN;
        return Err(StreamError::Truncated {
            offset: HEADER_LEN + whole * RECORD_LEN,
            expected,
            actual: bytes.len(),
            records: record_count,
        });
    }
    if bytes.len() > expected {
        return Err(StreamError::TrailingBytes(bytes.len() - expected));
    }

    let mut records = Vec::with_capacity(record_count as usize);
    for i in 0..record_count as usize {
        let offset = HEADER_LEN + i * RECORD_LEN;
        let rec = &bytes[offset..offset + RECORD_LEN];
        let raw = u16::from_le_bytes(rec[0..2].try_into().unwrap());
        let channel = Channel::from_u16(raw).ok_or(StreamError::InvalidChannel { raw, offset })?;
        let timestamp_ps = u64::from_le_bytes(rec[8..16].try_into().unwrap());
        if let Some(prev) = records.last() {
            let prev: &TimeTagRecord = prev;
            if timestamp_ps < prev.timestamp_ps {
                return Err(StreamError::Unsorted(i));
            }
        }
        records.push(TimeTagRecord {
            channel,
            timestamp_ps,
        });
    }

    Ok((
        StreamHeader {
            version,
            resolution_ps,
            pulse_period_ps,
            record_count,
        },
        records,
    ))
}

/// Groups a sorted record list into pulse cycles. Each non-trigger event is
/// assigned to the most recent preceding trigger; events before the first
/// trigger are counted and dropped. Errors if the stream has no trigger.
pub fn split_by_trigger(records: &[TimeTagRecord]) -> Result<SplitStream, StreamError> {
    let mut cycles: Vec<PulseCycle> = Vec::new();
    let mut discarded = 0usize;
    for rec in records {
        match rec.channel {
            Channel::Trigger => cycles.push(PulseCycle {
                trigger_ps: rec.timestamp_ps,
                events: Vec::new(),
            }),
            _ => match cycles.last_mut() {
                Some(cycle) => cycle.events.push(CycleEvent {
                    channel: rec.channel,
                    relative_ps: rec.timestamp_ps - cycle.trigger_ps,
                }),
                None => discarded += 1,
            },
        }
    }
    if cycles.is_empty() {
        return Err(StreamError::NoTrigger);
    }
    Ok(SplitStream {
        cycles,
        discarded_before_first_trigger: discarded,
    })
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(channel: Channel, timestamp_ps: u64) -> TimeTagRecord {
        TimeTagRecord {
            channel,
            timestamp_ps,
        }
    }

    #[test]
    fn empty_stream_is_header_only() {
        let header = StreamHeader::new(25_000_000);
        let bytes = encode_stream(&header, &[]).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        let (decoded, records) = decode_stream(&bytes).unwrap();
        assert_eq!(decoded.record_count, 0);
        assert_eq!(decoded.pulse_period_ps, 25_000_000);
        assert_eq!(decoded.resolution_ps, 1);
        assert!(records.is_empty());
    }

    #[test]
    fn single_record_layout_and_round_trip() {
        let header = StreamHeader::new(25_000_000);
        let records = [rec(Channel::Signal, 1000)];
        let bytes = encode_stream(&header, &records).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + RECORD_LEN);
        // Little-endian field layout of the record.
        assert_eq!(&bytes[32..34], &[1, 0]); // channel
        assert_eq!(&bytes[34..40], &[0; 6]); // flags + reserved
        assert_eq!(&bytes[40..48], &1000u64.to_le_bytes());
        let (decoded, out) = decode_stream(&bytes).unwrap();
        assert_eq!(out, records);
        assert_eq!(decoded.record_count, 1);
    }

    #[test]
    fn unsorted_input_reports_first_violation() {
        let header = StreamHeader::new(25_000_000);
        let records = [rec(Channel::Signal, 5), rec(Channel::Signal, 3)];
        assert_eq!(
            encode_stream(&header, &records),
            Err(StreamError::Unsorted(1))
        );
    }

    #[test]
    fn bad_magic_is_rejected() {
        let header = StreamHeader::new(25_000_000);
        let mut bytes = encode_stream(&header, &[]).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert_eq!(decode_stream(&bytes), Err(StreamError::BadMagic(*b"XXXX")));
    }

    #[test]
    fn truncated_stream_names_offset() {
        let header = StreamHeader::new(25_000_000);
        let records = [rec(Channel::Signal, 10), rec(Channel::Idler, 20)];
        let bytes = encode_stream(&header, &records).unwrap();
        // Keep the header, the first record, and half of the second.
        let cut = &bytes[..HEADER_LEN + RECORD_LEN + 8];
        match decode_stream(cut) {
            Err(StreamError::Truncated {
                offset,
                expected,
                records,
                ..
            }) => {
                assert_eq!(offset, HEADER_LEN + RECORD_LEN);
                assert_eq!(expected, HEADER_LEN + 2 * RECORD_LEN);
                assert_eq!(records, 2);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_channel_is_rejected_at_offset() {
        let header = StreamHeader::new(25_000_000);
        let mut bytes = encode_stream(&header, &[rec(Channel::Signal, 10)]).unwrap();
        bytes[32..34].copy_from_slice(&7u16.to_le_bytes());
        assert_eq!(
            decode_stream(&bytes),
            Err(StreamError::InvalidChannel {
                raw: 7,
                offset: HEADER_LEN
            })
        );
    }

    #[test]
    fn split_assigns_events_to_preceding_trigger() {
        let records = [
            rec(Channel::Trigger, 0),
            rec(Channel::Signal, 100),
            rec(Channel::Trigger, 25_000_000),
            rec(Channel::Idler, 25_000_050),
        ];
        let split = split_by_trigger(&records).unwrap();
        assert_eq!(split.cycles.len(), 2);
        assert_eq!(split.discarded_before_first_trigger, 0);
        assert_eq!(
            split.cycles[0].events,
            vec![CycleEvent {
                channel: Channel::Signal,
                relative_ps: 100
            }]
        );
        assert_eq!(
            split.cycles[1].events,
            vec![CycleEvent {
                channel: Channel::Idler,
                relative_ps: 50
            }]
        );
    }

    #[test]
    fn split_counts_events_before_first_trigger() {
        let records = [
            rec(Channel::Signal, 5),
            rec(Channel::Idler, 9),
            rec(Channel::Trigger, 10),
            rec(Channel::Signal, 15),
        ];
        let split = split_by_trigger(&records).unwrap();
        assert_eq!(split.discarded_before_first_trigger, 2);
        assert_eq!(split.cycles.len(), 1);
        assert_eq!(split.cycles[0].events.len(), 1);
    }

    #[test]
    fn split_without_trigger_errors() {
        let records = [rec(Channel::Signal, 5)];
        assert_eq!(split_by_trigger(&records), Err(StreamError::NoTrigger));
    }

    /// Sorted record lists with arbitrary channels and gaps.
    fn arb_records() -> impl Strategy<Value = Vec<TimeTagRecord>> {
        prop::collection::vec((0u16..3, 0u64..10_000), 0..200).prop_map(|raw| {
            let mut t = 0u64;
            raw.into_iter()
                .map(|(ch, dt)| {
                    t += dt;
                    TimeTagRecord {
                        channel: Channel::from_u16(ch).unwrap(),
                        timestamp_ps: t,
                    }
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn round_trip_preserves_header_and_records(records in arb_records()) {
            let mut header = StreamHeader::new(25_000_000);
            header.record_count = records.len() as u64;
            let bytes = encode_stream(&header, &records).unwrap();
            let (decoded_header, decoded) = decode_stream(&bytes).unwrap();
            prop_assert_eq!(decoded_header, header);
            prop_assert_eq!(decoded, records);
        }

        #[test]
        fn cycle_partition_accounts_for_every_event(records in arb_records()) {
            let non_trigger = records
                .iter()
                .filter(|r| r.channel != Channel::Trigger)
                .count();
            match split_by_trigger(&records) {
                Ok(split) => {
                    let in_cycles: usize =
                        split.cycles.iter().map(|c| c.events.len()).sum();
                    prop_assert_eq!(
                        non_trigger,
                        split.discarded_before_first_trigger + in_cycles
                    );
                    let triggers = records
                        .iter()
                        .filter(|r| r.channel == Channel::Trigger)
                        .count();
                    prop_assert_eq!(split.cycles.len(), triggers);
                }
                Err(StreamError::NoTrigger) => {
                    prop_assert!(records.iter().all(|r| r.channel != Channel::Trigger));
                }
                Err(e) => return Err(TestCaseError::fail(format!("unexpected {e:?}"))),
            }
        }

        #[test]
        fn periodic_triggers_bound_relative_times(
            period in 1_000u64..100_000,
            n_cycles in 1usize..20,
            offsets in prop::collection::vec((0u16..2, 0.0f64..1.0), 0..64),
        ) {
            // Strictly periodic triggers; detections scattered in between.
            let mut records: Vec<TimeTagRecord> = (0..n_cycles)
                .map(|k| rec(Channel::Trigger, k as u64 * period))
                .collect();
            for (ch, frac) in offsets {
                let cycle = (frac * n_cycles as f64) as u64 % n_cycles as u64;
                let within = (frac * period as f64) as u64 % period;
                records.push(rec(
                    Channel::from_u16(ch + 1).unwrap(),
                    cycle * period + within,
                ));
            }
            records.sort_by_key(|r| (r.timestamp_ps, r.channel.as_u16()));
            let split = split_by_trigger(&records).unwrap();
            for cycle in &split.cycles {
                for ev in &cycle.events {
                    prop_assert!(ev.relative_ps < period);
                }
            }
        }
    }
}
