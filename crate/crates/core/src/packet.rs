//! Firing-packet wire format.
//!
//! Packet layout (112 bytes, little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 2    | magic `0x55AA`                          |
//! | 2      | 52   | block 0                                 |
//! | 54     | 52   | block 1                                 |
//! | 106    | 4    | timestamp, µs since sensor power-on     |
//! | 110    | 2    | factory code `0x2237`                   |
//!
//! Each block is a `0xEEFF` flag, the vertical angle in centidegrees, then
//! 16 × (distance in 2 mm units: u16, reflectivity: u8). Distance 0 means
//! no return. Every 82 packets form one 360° vertical sweep.

use thiserror::Error;

use crate::model::{
    BEAMS, BLOCKS_PER_PACKET, BLOCKS_PER_SWEEP, MAX_RANGE_M, MIN_RANGE_M, PACKETS_PER_SWEEP,
    RETURNS_PER_SWEEP,
};

pub const CODEC_FORMAT_VERSION: u32 = 1;

pub const PACKET_LEN: usize = 112;
pub const BLOCK_LEN: usize = 52;
pub const SWEEP_LEN: usize = PACKET_LEN * PACKETS_PER_SWEEP;

pub const MAGIC: u16 = 0x55AA;
pub const BLOCK_FLAG: u16 = 0xEEFF;
pub const FACTORY_CODE: u16 = 0x2237;

pub const DISTANCE_UNIT_M: f64 = 0.002;
pub const MIN_DISTANCE_RAW: u16 = 250;
pub const MAX_DISTANCE_RAW: u16 = 50_000;
pub const MAX_VERTICAL_ANGLE: u16 = 36_000;

/// Time between consecutive packets of a sweep (10 Hz spin / 82 packets).
pub const PACKET_INTERVAL_US: u32 = 1_220;

const BLOCK0_OFFSET: usize = 2;
const TIMESTAMP_OFFSET: usize = BLOCK0_OFFSET + BLOCKS_PER_PACKET * BLOCK_LEN;
const FACTORY_OFFSET: usize = TIMESTAMP_OFFSET + 4;
const CHANNEL_LEN: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PacketError {
    #[error("truncated packet: {len} of {PACKET_LEN} bytes")]
    Truncated { len: usize },
    #[error("bad magic 0x{found:04X} at byte offset {offset}")]
    BadMagic { offset: usize, found: u16 },
    #[error("bad block flag 0x{found:04X} at byte offset {offset}")]
    BadBlockFlag { offset: usize, found: u16 },
    #[error("vertical angle {value} >= 36000 at byte offset {offset}")]
    AngleOutOfRange { offset: usize, value: u16 },
    #[error("distance {value} (2 mm units) outside sensor range at byte offset {offset}")]
    DistanceOutOfRange { offset: usize, value: u16 },
    #[error("block index {0} outside 0..{BLOCKS_PER_SWEEP}")]
    BlockIndexOutOfRange(usize),
    #[error("return slot {slot}: distance {distance_m} m outside [0.5, 100] m")]
    EncodeDistanceOutOfRange { slot: usize, distance_m: f64 },
    #[error("expected {RETURNS_PER_SWEEP} return slots, got {0}")]
    WrongReturnCount(usize),
    #[error("expected {PACKETS_PER_SWEEP} packets per sweep, got {0}")]
    WrongPacketCount(usize),
    #[error("block {block} has vertical angle {found}, expected {expected}")]
    SweepAngle {
        block: usize,
        found: u16,
        expected: u16,
    },
}

/// Raw vertical angle of block `b` within a sweep: `floor(b · 36000 / 164)`.
pub fn block_vertical_angle(block_index: usize) -> Result<u16, PacketError> {
    if block_index >= BLOCKS_PER_SWEEP {
        return Err(PacketError::BlockIndexOutOfRange(block_index));
    }
    Ok((block_index * MAX_VERTICAL_ANGLE as usize / BLOCKS_PER_SWEEP) as u16)
}

/// Quantizes a range to the nearest 2 mm unit.
pub fn quantize_distance(distance_m: f64) -> Option<u16> {
    if !(MIN_RANGE_M..=MAX_RANGE_M).contains(&distance_m) {
        return None;
    }
    let raw = (distance_m / DISTANCE_UNIT_M).round() as u16;
    Some(raw.clamp(MIN_DISTANCE_RAW, MAX_DISTANCE_RAW))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct ChannelReturn {
    pub distance_2mm: u16,
    pub reflectivity: u8,
}

impl ChannelReturn {
    pub const NONE: ChannelReturn = ChannelReturn {
        distance_2mm: 0,
        reflectivity: 0,
    };

    pub fn distance_m(&self) -> Option<f64> {
        (self.distance_2mm != 0).then(|| self.distance_2mm as f64 * DISTANCE_UNIT_M)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct FiringBlock {
    pub vertical_angle_centideg: u16,
    pub channels: [ChannelReturn; BEAMS],
}

impl FiringBlock {
    pub fn vertical_angle_deg(&self) -> f64 {
        self.vertical_angle_centideg as f64 / 100.0
    }

    fn write(&self, out: &mut [u8]) {
        out[0..2].copy_from_slice(&BLOCK_FLAG.to_le_bytes());
        out[2..4].copy_from_slice(&self.vertical_angle_centideg.to_le_bytes());
        for (i, ch) in self.channels.iter().enumerate() {
            let o = 4 + i * CHANNEL_LEN;
            out[o..o + 2].copy_from_slice(&ch.distance_2mm.to_le_bytes());
            out[o + 2] = ch.reflectivity;
        }
    }

    fn read(bytes: &[u8], base: usize) -> Result<Self, PacketError> {
        let flag = u16_at(bytes, 0);
        if flag != BLOCK_FLAG {
            return Err(PacketError::BadBlockFlag {
                offset: base,
                found: flag,
            });
        }
        let angle = u16_at(bytes, 2);
        if angle >= MAX_VERTICAL_ANGLE {
            return Err(PacketError::AngleOutOfRange {
                offset: base + 2,
                value: angle,
            });
        }
        let mut channels = [ChannelReturn::NONE; BEAMS];
        for (i, ch) in channels.iter_mut().enumerate() {
            let o = 4 + i * CHANNEL_LEN;
            let d = u16_at(bytes, o);
            if d != 0 && !(MIN_DISTANCE_RAW..=MAX_DISTANCE_RAW).contains(&d) {
                return Err(PacketError::DistanceOutOfRange {
                    offset: base + o,
                    value: d,
                });
            }
            *ch = ChannelReturn {
                distance_2mm: d,
                reflectivity: bytes[o + 2],
            };
        }
        Ok(FiringBlock {
            vertical_angle_centideg: angle,
            channels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FiringPacket {
    pub blocks: [FiringBlock; BLOCKS_PER_PACKET],
    pub timestamp_us: u32,
    pub factory: u16,
}

impl FiringPacket {
    pub fn encode(&self) -> [u8; PACKET_LEN] {
        let mut out = [0u8; PACKET_LEN];
        out[0..2].copy_from_slice(&MAGIC.to_le_bytes());
        for (j, block) in self.blocks.iter().enumerate() {
            let o = BLOCK0_OFFSET + j * BLOCK_LEN;
            block.write(&mut out[o..o + BLOCK_LEN]);
        }
        out[TIMESTAMP_OFFSET..FACTORY_OFFSET].copy_from_slice(&self.timestamp_us.to_le_bytes());
        out[FACTORY_OFFSET..PACKET_LEN].copy_from_slice(&self.factory.to_le_bytes());
        out
    }
}

fn u16_at(bytes: &[u8], o: usize) -> u16 {
    u16::from_le_bytes([bytes[o], bytes[o + 1]])
}

/// Parses one packet from the start of `bytes`. Only the first 112 bytes
/// are read.
pub fn decode_packet(bytes: &[u8]) -> Result<FiringPacket, PacketError> {
    if bytes.len() < PACKET_LEN {
        return Err(PacketError::Truncated { len: bytes.len() });
    }
    let magic = u16_at(bytes, 0);
    if magic != MAGIC {
        return Err(PacketError::BadMagic {
            offset: 0,
            found: magic,
        });
    }
    let mut blocks = [FiringBlock::default(); BLOCKS_PER_PACKET];
    for (j, block) in blocks.iter_mut().enumerate() {
        let o = BLOCK0_OFFSET + j * BLOCK_LEN;
        *block = FiringBlock::read(&bytes[o..o + BLOCK_LEN], o)?;
    }
    let timestamp_us =
        u32::from_le_bytes(bytes[TIMESTAMP_OFFSET..FACTORY_OFFSET].try_into().unwrap());
    let factory = u16_at(bytes, FACTORY_OFFSET);
    Ok(FiringPacket {
        blocks,
        timestamp_us,
        factory,
    })
}

/// One full vertical sweep: exactly 82 packets with the canonical block
/// angle pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sweep {
    packets: Vec<FiringPacket>,
}

impl Sweep {
    pub fn new(packets: Vec<FiringPacket>) -> Result<Self, PacketError> {
        if packets.len() != PACKETS_PER_SWEEP {
            return Err(PacketError::WrongPacketCount(packets.len()));
        }
        for (b, block) in packets.iter().flat_map(|p| p.blocks.iter()).enumerate() {
            let expected = block_vertical_angle(b)?;
            if block.vertical_angle_centideg != expected {
                return Err(PacketError::SweepAngle {
                    block: b,
                    found: block.vertical_angle_centideg,
                    expected,
                });
            }
        }
        Ok(Sweep { packets })
    }

    pub fn packets(&self) -> &[FiringPacket] {
        &self.packets
    }

    /// Blocks in sweep order, each with the timestamp of its packet.
    pub fn blocks(&self) -> impl Iterator<Item = (&FiringBlock, u32)> + '_ {
        self.packets
            .iter()
            .flat_map(|p| p.blocks.iter().map(move |b| (b, p.timestamp_us)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SWEEP_LEN);
        self.write_to(&mut out);
        out
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        for p in &self.packets {
            out.extend_from_slice(&p.encode());
        }
    }
}

/// Builds a sweep from 164×16 optional `(distance_m, reflectivity)` slots
/// indexed `block * 16 + channel`. Packet `p` is stamped
/// `timestamp_us + p · PACKET_INTERVAL_US`.
pub fn build_sweep(returns: &[Option<(f64, u8)>], timestamp_us: u32) -> Result<Sweep, PacketError> {
    if returns.len() != RETURNS_PER_SWEEP {
        return Err(PacketError::WrongReturnCount(returns.len()));
    }
    let mut packets = Vec::with_capacity(PACKETS_PER_SWEEP);
    for p in 0..PACKETS_PER_SWEEP {
        let mut blocks = [FiringBlock::default(); BLOCKS_PER_PACKET];
        for (j, block) in blocks.iter_mut().enumerate() {
            let b = p * BLOCKS_PER_PACKET + j;
            block.vertical_angle_centideg = block_vertical_angle(b)?;
            for (ch, slot) in block.channels.iter_mut().enumerate() {
                let idx = b * BEAMS + ch;
                *slot = match returns[idx] {
                    None => ChannelReturn::NONE,
                    Some((d, refl)) => ChannelReturn {
                        distance_2mm: quantize_distance(d).ok_or(
                            PacketError::EncodeDistanceOutOfRange {
                                slot: idx,
                                distance_m: d,
                            },
                        )?,
                        reflectivity: refl,
                    },
                };
            }
        }
        packets.push(FiringPacket {
            blocks,
            timestamp_us: timestamp_us.wrapping_add(p as u32 * PACKET_INTERVAL_US),
            factory: FACTORY_CODE,
        });
    }
    Ok(Sweep { packets })
}

/// Encodes a sweep of optional returns into 82 packets (9184 bytes).
pub fn encode_sweep(
    returns: &[Option<(f64, u8)>],
    timestamp_us: u32,
) -> Result<Vec<u8>, PacketError> {
    Ok(build_sweep(returns, timestamp_us)?.to_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    /// A packet failed to parse; its sweep was rejected.
    BadPacket {
        sweep_index: usize,
        packet_index: usize,
        byte_offset: usize,
        error: PacketError,
    },
    /// All packets parsed but the block angle pattern is wrong.
    BadSweep {
        sweep_index: usize,
        byte_offset: usize,
        error: PacketError,
    },
    /// Fewer than 82 whole packets at the end of the stream.
    PartialSweep { byte_offset: usize, packets: usize },
    /// Fewer than 112 bytes at the end of the stream.
    TrailingPartialPacket { byte_offset: usize, len: usize },
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Diagnostic::BadPacket {
                sweep_index,
                packet_index,
                byte_offset,
                error,
            } => write!(
                f,
                "sweep {sweep_index} packet {packet_index} (stream offset {byte_offset}): {error}"
            ),
            Diagnostic::BadSweep {
                sweep_index,
                byte_offset,
                error,
            } => write!(
                f,
                "sweep {sweep_index} (stream offset {byte_offset}): {error}"
            ),
            Diagnostic::PartialSweep {
                byte_offset,
                packets,
            } => write!(
                f,
                "partial final sweep of {packets} packets at stream offset {byte_offset}"
            ),
            Diagnostic::TrailingPartialPacket { byte_offset, len } => write!(
                f,
                "trailing partial packet of {len} bytes at stream offset {byte_offset}"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StreamDecode {
    /// Accepted sweeps in stream order.
    pub sweeps: Vec<Sweep>,
    /// Stream index (0-based, counting rejected ones) of each accepted sweep.
    pub sweep_indices: Vec<usize>,
    pub diagnostics: Vec<Diagnostic>,
    /// Bytes not accounted for by accepted sweeps.
    pub rejected_bytes: usize,
}

/// Splits a raw capture stream into sweeps. A sweep with any bad packet is
/// dropped whole and reported.
pub fn decode_stream(bytes: &[u8]) -> StreamDecode {
    let mut out = StreamDecode::default();
    let mut chunks = bytes.chunks_exact(SWEEP_LEN);
    for (s, chunk) in chunks.by_ref().enumerate() {
        let base = s * SWEEP_LEN;
        let mut packets = Vec::with_capacity(PACKETS_PER_SWEEP);
        let mut ok = true;
        for (p, raw) in chunk.chunks_exact(PACKET_LEN).enumerate() {
            match decode_packet(raw) {
                Ok(pkt) => packets.push(pkt),
                Err(error) => {
                    ok = false;
                    out.diagnostics.push(Diagnostic::BadPacket {
                        sweep_index: s,
                        packet_index: p,
                        byte_offset: base + p * PACKET_LEN,
                        error,
                    });
                }
            }
        }
        if !ok {
            out.rejected_bytes += SWEEP_LEN;
            continue;
        }
        match Sweep::new(packets) {
            Ok(sweep) => {
                out.sweeps.push(sweep);
                out.sweep_indices.push(s);
            }
            Err(error) => {
                out.rejected_bytes += SWEEP_LEN;
                out.diagnostics.push(Diagnostic::BadSweep {
                    sweep_index: s,
                    byte_offset: base,
                    error,
                });
            }
        }
    }

    let rest = chunks.remainder();
    let rest_base = bytes.len() - rest.len();
    let whole = rest.len() / PACKET_LEN;
    if whole > 0 {
        out.diagnostics.push(Diagnostic::PartialSweep {
            byte_offset: rest_base,
            packets: whole,
        });
    }
    let tail = rest.len() % PACKET_LEN;
    if tail > 0 {
        out.diagnostics.push(Diagnostic::TrailingPartialPacket {
            byte_offset: bytes.len() - tail,
            len: tail,
        });
    }
    out.rejected_bytes += rest.len();
    out
}
