//! Grouping packets into 5-tuple flows.

use std::collections::HashMap;
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::packet::{locate_network, Ipv4View, NetLayer};
use super::pcap::{Capture, RawPacket};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
}

impl FlowKey {
    fn of(view: &Ipv4View) -> Self {
        Self {
            src_ip: view.src,
            dst_ip: view.dst,
            src_port: view.src_port,
            dst_port: view.dst_port,
            protocol: view.protocol,
        }
    }

    /// Direction-free key: both directions of a session map to the same value.
    pub fn canonical(self) -> Self {
        if (self.src_ip, self.src_port) <= (self.dst_ip, self.dst_port) {
            self
        } else {
            Self {
                src_ip: self.dst_ip,
                dst_ip: self.src_ip,
                src_port: self.dst_port,
                dst_port: self.src_port,
                protocol: self.protocol,
            }
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} /{}",
            self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.protocol
        )
    }
}

/// Which bytes of each packet make up a flow's payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadMode {
    /// Whole IP datagrams, headers included.
    #[default]
    IpPackets,
    /// Transport payload only.
    TransportPayload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficFlow {
    pub key: FlowKey,
    pub link_type: u32,
    /// Packets in timestamp order (capture order on ties).
    pub packets: Vec<RawPacket>,
    pub label: usize,
}

impl TrafficFlow {
    /// Concatenated packet bytes in arrival order.
    pub fn payload(&self, mode: PayloadMode) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.packets {
            let NetLayer::Ipv4(off) = locate_network(self.link_type, &p.data) else {
                continue;
            };
            let Some(view) = Ipv4View::parse(&p.data, off) else {
                continue;
            };
            match mode {
                PayloadMode::IpPackets => out.extend_from_slice(view.datagram(&p.data)),
                PayloadMode::TransportPayload => {
                    out.extend_from_slice(view.transport_payload(&p.data))
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub packets: usize,
    pub ip_packets: usize,
    pub skipped_non_ip: usize,
    pub skipped_ipv6: usize,
    pub skipped_unparsed: usize,
}

impl SplitStats {
    pub fn skipped(&self) -> usize {
        self.skipped_non_ip + self.skipped_ipv6 + self.skipped_unparsed
    }

    pub fn merge(&mut self, other: &SplitStats) {
        self.packets += other.packets;
        self.ip_packets += other.ip_packets;
        self.skipped_non_ip += other.skipped_non_ip;
        self.skipped_ipv6 += other.skipped_ipv6;
        self.skipped_unparsed += other.skipped_unparsed;
    }
}

/// Partitions the IPv4 TCP/UDP packets of a capture by 5-tuple. Flows are
/// returned in order of first appearance; `session` merges both directions.
pub fn split_flows(capture: &Capture, session: bool) -> (Vec<TrafficFlow>, SplitStats) {
    let mut stats = SplitStats {
        packets: capture.packets.len(),
        ..SplitStats::default()
    };
    let mut index: HashMap<FlowKey, usize> = HashMap::new();
    let mut flows: Vec<TrafficFlow> = Vec::new();
    for p in &capture.packets {
        let off = match locate_network(capture.link_type, &p.data) {
            NetLayer::Ipv4(off) => off,
            NetLayer::Ipv6 => {
                stats.skipped_ipv6 += 1;
                continue;
            }
            NetLayer::Other => {
                stats.skipped_non_ip += 1;
                continue;
            }
        };
        let Some(view) = Ipv4View::parse(&p.data, off) else {
            stats.skipped_unparsed += 1;
            continue;
        };
        stats.ip_packets += 1;
        let mut key = FlowKey::of(&view);
        if session {
            key = key.canonical();
        }
        let slot = *index.entry(key).or_insert_with(|| {
            flows.push(TrafficFlow {
                key,
                link_type: capture.link_type,
                packets: Vec::new(),
                label: 0,
            });
            flows.len() - 1
        });
        flows[slot].packets.push(p.clone());
    }
    for f in &mut flows {
        // stable: capture order survives on equal timestamps
        f.packets.sort_by_key(RawPacket::timestamp_us);
    }
    (flows, stats)
}
