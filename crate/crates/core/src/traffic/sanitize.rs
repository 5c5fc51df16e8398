//! Address anonymization through seeded Feistel permutations.
//!
//! IPv4 addresses (32 bits) and MAC addresses (48 bits) are each pushed
//! through a balanced four-round Feistel network keyed by the corpus seed,
//! which makes the maps bijections by construction. Checksums are refreshed
//! after rewriting so every frame stays well-formed.

use std::collections::{BTreeMap, HashSet};
use std::net::Ipv4Addr;

use serde::Serialize;

use super::flow::{FlowKey, PayloadMode, TrafficFlow};
use super::packet::{locate_network, refresh_checksums, Ipv4View, NetLayer};
use super::pcap::{LINKTYPE_ETHERNET, LINKTYPE_LINUX_SLL};

const ROUNDS: u64 = 4;
const IP_DOMAIN: u64 = 0x6970_7634;
const MAC_DOMAIN: u64 = 0x6d61_6373;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Permutes the low `2 * half_bits` bits of `x`.
fn feistel(key: u64, half_bits: u32, x: u64) -> u64 {
    let mask = (1u64 << half_bits) - 1;
    let (mut l, mut r) = ((x >> half_bits) & mask, x & mask);
    for round in 0..ROUNDS {
        let f = splitmix64(key ^ (round << 56) ^ r) & mask;
        (l, r) = (r, l ^ f);
    }
    (l << half_bits) | r
}

/// Records every address it has rewritten, for the run manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SanitizationMap {
    pub seed: u64,
    pub ip_map: BTreeMap<Ipv4Addr, Ipv4Addr>,
    pub mac_map: BTreeMap<[u8; 6], [u8; 6]>,
    #[serde(skip)]
    ip_key: u64,
    #[serde(skip)]
    mac_key: u64,
}

impl SanitizationMap {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ip_map: BTreeMap::new(),
            mac_map: BTreeMap::new(),
            ip_key: splitmix64(seed ^ IP_DOMAIN),
            mac_key: splitmix64(seed ^ MAC_DOMAIN),
        }
    }

    /// The keyed permutation itself, without recording.
    pub fn permute_ip(&self, ip: Ipv4Addr) -> Ipv4Addr {
        Ipv4Addr::from(feistel(self.ip_key, 16, u32::from(ip) as u64) as u32)
    }

    pub fn permute_mac(&self, mac: [u8; 6]) -> [u8; 6] {
        let mut wide = [0u8; 8];
        wide[2..].copy_from_slice(&mac);
        let out = feistel(self.mac_key, 24, u64::from_be_bytes(wide)).to_be_bytes();
        out[2..].try_into().unwrap()
    }

    pub fn map_ip(&mut self, ip: Ipv4Addr) -> Ipv4Addr {
        let out = self.permute_ip(ip);
        self.ip_map.insert(ip, out);
        out
    }

    pub fn map_mac(&mut self, mac: [u8; 6]) -> [u8; 6] {
        let out = self.permute_mac(mac);
        self.mac_map.insert(mac, out);
        out
    }

    fn rewrite_mac_at(&mut self, frame: &mut [u8], at: usize) {
        let mac: [u8; 6] = frame[at..at + 6].try_into().unwrap();
        let mapped = self.map_mac(mac);
        frame[at..at + 6].copy_from_slice(&mapped);
    }

    /// Rewrites link and IPv4 addresses of one frame in place.
    pub fn rewrite_frame(&mut self, link_type: u32, frame: &mut [u8]) {
        match link_type {
            LINKTYPE_ETHERNET if frame.len() >= 12 => {
                self.rewrite_mac_at(frame, 0);
                self.rewrite_mac_at(frame, 6);
            }
            LINKTYPE_LINUX_SLL if frame.len() >= 14 => {
                if u16::from_be_bytes([frame[4], frame[5]]) == 6 {
                    self.rewrite_mac_at(frame, 6);
                }
            }
            _ => {}
        }
        let NetLayer::Ipv4(off) = locate_network(link_type, frame) else {
            return;
        };
        let Some(view) = Ipv4View::parse(frame, off) else {
            return;
        };
        let src = self.map_ip(view.src);
        let dst = self.map_ip(view.dst);
        frame[off + 12..off + 16].copy_from_slice(&src.octets());
        frame[off + 16..off + 20].copy_from_slice(&dst.octets());
        refresh_checksums(frame, &view);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SanitizeStats {
    pub input_flows: usize,
    pub dropped_empty: usize,
    pub dropped_duplicate: usize,
}

/// Anonymizes every flow, then drops flows whose payload (under `mode`) is
/// empty or byte-identical to an earlier survivor.
pub fn sanitize_corpus(
    flows: Vec<TrafficFlow>,
    seed: u64,
    mode: PayloadMode,
) -> (Vec<TrafficFlow>, SanitizationMap, SanitizeStats) {
    let mut map = SanitizationMap::new(seed);
    let mut stats = SanitizeStats {
        input_flows: flows.len(),
        ..SanitizeStats::default()
    };
    let mut seen: HashSet<Vec<u8>> = HashSet::new();
    let mut out = Vec::with_capacity(flows.len());
    for mut flow in flows {
        for p in &mut flow.packets {
            map.rewrite_frame(flow.link_type, &mut p.data);
        }
        flow.key = FlowKey {
            src_ip: map.permute_ip(flow.key.src_ip),
            dst_ip: map.permute_ip(flow.key.dst_ip),
            ..flow.key
        };
        let payload = flow.payload(mode);
        if payload.is_empty() {
            stats.dropped_empty += 1;
            continue;
        }
        if !seen.insert(payload) {
            stats.dropped_duplicate += 1;
            continue;
        }
        out.push(flow);
    }
    (out, map, stats)
}
