//! Minimal link/IPv4/TCP/UDP header decoding and checksum maintenance.

use std::net::Ipv4Addr;

use super::pcap::{
    LINKTYPE_ETHERNET, LINKTYPE_IPV4, LINKTYPE_LINUX_SLL, LINKTYPE_NULL, LINKTYPE_RAW,
};

pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const ETHERTYPE_VLAN: u16 = 0x8100;

/// What sits at the network layer of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetLayer {
    Ipv4(usize),
    Ipv6,
    Other,
}

/// Locates the network-layer header for a given link type.
pub fn locate_network(link_type: u32, frame: &[u8]) -> NetLayer {
    let by_version = |off: usize| match frame.get(off).map(|b| b >> 4) {
        Some(4) => NetLayer::Ipv4(off),
        Some(6) => NetLayer::Ipv6,
        _ => NetLayer::Other,
    };
    let by_ethertype = |ty: u16, off: usize| match ty {
        ETHERTYPE_IPV4 => NetLayer::Ipv4(off),
        ETHERTYPE_IPV6 => NetLayer::Ipv6,
        _ => NetLayer::Other,
    };
    match link_type {
        LINKTYPE_ETHERNET => {
            if frame.len() < 14 {
                return NetLayer::Other;
            }
            let mut ty = u16::from_be_bytes([frame[12], frame[13]]);
            let mut off = 14;
            while ty == ETHERTYPE_VLAN {
                if frame.len() < off + 4 {
                    return NetLayer::Other;
                }
                ty = u16::from_be_bytes([frame[off + 2], frame[off + 3]]);
                off += 4;
            }
            by_ethertype(ty, off)
        }
        LINKTYPE_RAW | LINKTYPE_IPV4 => by_version(0),
        LINKTYPE_NULL => by_version(4),
        LINKTYPE_LINUX_SLL => {
            if frame.len() < 16 {
                return NetLayer::Other;
            }
            by_ethertype(u16::from_be_bytes([frame[14], frame[15]]), 16)
        }
        _ => NetLayer::Other,
    }
}

/// Decoded IPv4 + transport fields of one packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ipv4View {
    pub ip_offset: usize,
    pub header_len: usize,
    /// Bytes of the IP datagram actually present in the capture.
    pub captured_len: usize,
    pub total_len: usize,
    pub protocol: u8,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    /// Offset of the transport payload relative to `ip_offset`.
    pub payload_offset: usize,
}

impl Ipv4View {
    pub fn parse(frame: &[u8], ip_offset: usize) -> Option<Self> {
        let ip = frame.get(ip_offset..)?;
        if ip.len() < 20 || ip[0] >> 4 != 4 {
            return None;
        }
        let header_len = (ip[0] & 0x0f) as usize * 4;
        if header_len < 20 || ip.len() < header_len {
            return None;
        }
        let total_len = u16::from_be_bytes([ip[2], ip[3]]) as usize;
        if total_len < header_len {
            return None;
        }
        let captured_len = total_len.min(ip.len());
        let protocol = ip[9];
        let src = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
        let dst = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
        let l4 = &ip[header_len..captured_len];
        let (src_port, dst_port, l4_header) = match protocol {
            PROTO_TCP if l4.len() >= 20 => {
                let data_off = (l4[12] >> 4) as usize * 4;
                (
                    u16::from_be_bytes([l4[0], l4[1]]),
                    u16::from_be_bytes([l4[2], l4[3]]),
                    data_off.clamp(20, l4.len()),
                )
            }
            PROTO_UDP if l4.len() >= 8 => (
                u16::from_be_bytes([l4[0], l4[1]]),
                u16::from_be_bytes([l4[2], l4[3]]),
                8,
            ),
            _ => return None,
        };
        Some(Self {
            ip_offset,
            header_len,
            captured_len,
            total_len,
            protocol,
            src,
            dst,
            src_port,
            dst_port,
            payload_offset: header_len + l4_header,
        })
    }

    /// The IP datagram bytes present in `frame`.
    pub fn datagram<'a>(&self, frame: &'a [u8]) -> &'a [u8] {
        &frame[self.ip_offset..self.ip_offset + self.captured_len]
    }

    /// Transport payload bytes present in `frame`.
    pub fn transport_payload<'a>(&self, frame: &'a [u8]) -> &'a [u8] {
        let start = (self.ip_offset + self.payload_offset).min(self.ip_offset + self.captured_len);
        &frame[start..self.ip_offset + self.captured_len]
    }
}

/// RFC 1071 ones'-complement sum, folded and complemented.
pub fn internet_checksum(chunks: &[&[u8]]) -> u16 {
    let mut sum: u32 = 0;
    let mut carry: Option<u8> = None;
    for chunk in chunks {
        for &b in *chunk {
            match carry.take() {
                Some(hi) => sum += u16::from_be_bytes([hi, b]) as u32,
                None => carry = Some(b),
            }
        }
    }
    if let Some(hi) = carry {
        sum += (hi as u32) << 8;
    }
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Recomputes the IPv4 header checksum and, when the whole segment was
/// captured, the TCP/UDP checksum. A zero UDP checksum ("none") is kept.
pub fn refresh_checksums(frame: &mut [u8], view: &Ipv4View) {
    let ip = view.ip_offset;
    let hl = view.header_len;
    frame[ip + 10] = 0;
    frame[ip + 11] = 0;
    let c = internet_checksum(&[&frame[ip..ip + hl]]);
    frame[ip + 10..ip + 12].copy_from_slice(&c.to_be_bytes());

    if view.captured_len < view.total_len {
        return;
    }
    let seg_start = ip + hl;
    let seg_end = ip + view.total_len;
    let csum_at = match view.protocol {
        PROTO_TCP => seg_start + 16,
        PROTO_UDP => {
            if frame[seg_start + 6] == 0 && frame[seg_start + 7] == 0 {
                return;
            }
            seg_start + 6
        }
        _ => return,
    };
    frame[csum_at] = 0;
    frame[csum_at + 1] = 0;
    let seg_len = (seg_end - seg_start) as u16;
    let pseudo = [
        &frame[ip + 12..ip + 20],
        &[0, view.protocol][..],
        &seg_len.to_be_bytes()[..],
    ]
    .concat();
    let mut c = internet_checksum(&[&pseudo, &frame[seg_start..seg_end]]);
    if view.protocol == PROTO_UDP && c == 0 {
        c = 0xffff;
    }
    frame[csum_at..csum_at + 2].copy_from_slice(&c.to_be_bytes());
}
