//! Classic libpcap reader and writer (microsecond timestamps, either byte order).

use std::fs;
use std::path::Path;

use super::TrafficError;

const MAGIC: u32 = 0xa1b2_c3d4;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

pub const LINKTYPE_NULL: u32 = 0;
pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW: u32 = 101;
pub const LINKTYPE_LINUX_SLL: u32 = 113;
pub const LINKTYPE_IPV4: u32 = 228;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn u32(self, b: &[u8]) -> u32 {
        let a: [u8; 4] = b[..4].try_into().unwrap();
        match self {
            ByteOrder::Little => u32::from_le_bytes(a),
            ByteOrder::Big => u32::from_be_bytes(a),
        }
    }

    fn put_u32(self, out: &mut Vec<u8>, v: u32) {
        match self {
            ByteOrder::Little => out.extend_from_slice(&v.to_le_bytes()),
            ByteOrder::Big => out.extend_from_slice(&v.to_be_bytes()),
        }
    }

    fn put_u16(self, out: &mut Vec<u8>, v: u16) {
        match self {
            ByteOrder::Little => out.extend_from_slice(&v.to_le_bytes()),
            ByteOrder::Big => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
}

/// One captured frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPacket {
    pub ts_sec: u32,
    pub ts_usec: u32,
    /// Captured bytes, starting at the link layer.
    pub data: Vec<u8>,
    /// Length on the wire; never smaller than `data.len()`.
    pub orig_len: u32,
}

impl RawPacket {
    pub fn new(ts_sec: u32, ts_usec: u32, data: Vec<u8>) -> Self {
        let orig_len = data.len() as u32;
        Self {
            ts_sec,
            ts_usec,
            data,
            orig_len,
        }
    }

    pub fn timestamp_us(&self) -> u64 {
        self.ts_sec as u64 * 1_000_000 + self.ts_usec as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Capture {
    pub link_type: u32,
    pub snaplen: u32,
    pub byte_order: ByteOrder,
    pub packets: Vec<RawPacket>,
}

impl Capture {
    pub fn new(link_type: u32, packets: Vec<RawPacket>) -> Self {
        Self {
            link_type,
            snaplen: 65_535,
            byte_order: ByteOrder::Little,
            packets,
        }
    }
}

pub fn parse_pcap(path: &Path) -> Result<Capture, TrafficError> {
    let bytes = fs::read(path).map_err(|e| TrafficError::io(path, e))?;
    parse_pcap_bytes(&bytes)
}

pub fn parse_pcap_bytes(bytes: &[u8]) -> Result<Capture, TrafficError> {
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(TrafficError::UnsupportedFormat(format!(
            "{} bytes is shorter than a pcap global header",
            bytes.len()
        )));
    }
    let order = match u32::from_le_bytes(bytes[..4].try_into().unwrap()) {
        MAGIC => ByteOrder::Little,
        m if m.swap_bytes() == MAGIC => ByteOrder::Big,
        m => {
            return Err(TrafficError::UnsupportedFormat(format!(
                "magic {m:#010x} is not classic pcap"
            )))
        }
    };
    let snaplen = order.u32(&bytes[16..]);
    let link_type = order.u32(&bytes[20..]);
    let mut packets = Vec::new();
    let mut pos = GLOBAL_HEADER_LEN;
    while pos < bytes.len() {
        if pos + RECORD_HEADER_LEN > bytes.len() {
            return Err(TrafficError::Parse {
                offset: pos,
                reason: "truncated record header".into(),
            });
        }
        let h = &bytes[pos..pos + RECORD_HEADER_LEN];
        let ts_sec = order.u32(h);
        let ts_usec = order.u32(&h[4..]);
        let incl_len = order.u32(&h[8..]) as usize;
        let orig_len = order.u32(&h[12..]);
        let body = pos + RECORD_HEADER_LEN;
        if body + incl_len > bytes.len() {
            return Err(TrafficError::Parse {
                offset: pos,
                reason: format!(
                    "record claims {incl_len} bytes, {} remain",
                    bytes.len() - body
                ),
            });
        }
        if incl_len == 0 {
            return Err(TrafficError::Parse {
                offset: pos,
                reason: "empty record".into(),
            });
        }
        if incl_len as u64 > orig_len as u64 {
            return Err(TrafficError::Parse {
                offset: pos,
                reason: format!("captured length {incl_len} exceeds wire length {orig_len}"),
            });
        }
        packets.push(RawPacket {
            ts_sec,
            ts_usec,
            data: bytes[body..body + incl_len].to_vec(),
            orig_len,
        });
        pos = body + incl_len;
    }
    Ok(Capture {
        link_type,
        snaplen,
        byte_order: order,
        packets,
    })
}

pub fn encode_pcap(capture: &Capture) -> Vec<u8> {
    let order = capture.byte_order;
    let mut out = Vec::with_capacity(
        GLOBAL_HEADER_LEN
            + capture
                .packets
                .iter()
                .map(|p| RECORD_HEADER_LEN + p.data.len())
                .sum::<usize>(),
    );
    order.put_u32(&mut out, MAGIC);
    order.put_u16(&mut out, 2);
    order.put_u16(&mut out, 4);
    order.put_u32(&mut out, 0);
    order.put_u32(&mut out, 0);
    order.put_u32(&mut out, capture.snaplen);
    order.put_u32(&mut out, capture.link_type);
    for p in &capture.packets {
        order.put_u32(&mut out, p.ts_sec);
        order.put_u32(&mut out, p.ts_usec);
        order.put_u32(&mut out, p.data.len() as u32);
        order.put_u32(&mut out, p.orig_len);
        out.extend_from_slice(&p.data);
    }
    out
}

pub fn write_pcap(path: &Path, capture: &Capture) -> Result<(), TrafficError> {
    fs::write(path, encode_pcap(capture)).map_err(|e| TrafficError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(order: ByteOrder) -> Capture {
        Capture {
            link_type: LINKTYPE_RAW,
            snaplen: 65_535,
            byte_order: order,
            packets: vec![
                RawPacket::new(100, 5, vec![0x45, 1, 2]),
                RawPacket {
                    ts_sec: 100,
                    ts_usec: 900_000,
                    data: vec![0x45; 10],
                    orig_len: 60,
                },
                RawPacket::new(101, 0, vec![9]),
            ],
        }
    }

    #[test]
    fn roundtrip_both_byte_orders() {
        for order in [ByteOrder::Little, ByteOrder::Big] {
            let cap = fixture(order);
            let parsed = parse_pcap_bytes(&encode_pcap(&cap)).unwrap();
            assert_eq!(parsed, cap);
        }
        let le = parse_pcap_bytes(&encode_pcap(&fixture(ByteOrder::Little))).unwrap();
        let be = parse_pcap_bytes(&encode_pcap(&fixture(ByteOrder::Big))).unwrap();
        assert_eq!(le.packets, be.packets);
    }

    #[test]
    fn header_only_is_empty() {
        let cap = Capture::new(LINKTYPE_ETHERNET, vec![]);
        assert!(parse_pcap_bytes(&encode_pcap(&cap)).unwrap().packets.is_empty());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = encode_pcap(&fixture(ByteOrder::Little));
        let truncated = &bytes[..bytes.len() - 1];
        match parse_pcap_bytes(truncated) {
            Err(TrafficError::Parse { offset, .. }) => assert_eq!(offset, 24 + 16 + 3 + 16 + 10),
            other => panic!("unexpected {other:?}"),
        }
        bytes[0] = 0x0a;
        assert!(matches!(
            parse_pcap_bytes(&bytes),
            Err(TrafficError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn three_record_fixture_matches_field_log() {
        let log = [(1_600_000_000u32, 250_000u32, 60usize), (1_600_000_000, 999_999, 1514), (1_600_000_003, 0, 42)];
        let packets: Vec<RawPacket> = log
            .iter()
            .map(|&(s, us, len)| RawPacket::new(s, us, vec![0xab; len]))
            .collect();
        let parsed = parse_pcap_bytes(&encode_pcap(&Capture::new(LINKTYPE_ETHERNET, packets))).unwrap();
        assert_eq!(parsed.packets.len(), 3);
        for (p, &(s, us, len)) in parsed.packets.iter().zip(&log) {
            assert_eq!((p.ts_sec, p.ts_usec, p.data.len(), p.orig_len as usize), (s, us, len, len));
        }
    }
}
