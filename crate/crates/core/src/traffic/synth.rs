//! Synthetic labeled corpora built from protocol-like byte templates.
//!
//! Four templates loosely imitate TLS records, DNS queries, MQTT sessions and
//! CoAP exchanges. Each class gets its own template (cycling, with shifted
//! ports, when more than four classes are requested), random addressing and
//! seeded per-flow noise. Flows are unidirectional client-to-server so one
//! synthetic flow maps to exactly one 5-tuple.

use std::fs;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::packet::{Ipv4View, PROTO_TCP, PROTO_UDP, refresh_checksums};
use super::pcap::{write_pcap, Capture, RawPacket, LINKTYPE_ETHERNET};
use super::TrafficError;

const TEMPLATE_NAMES: [&str; 4] = ["tls", "dns", "mqtt", "coap"];

/// Builds an Ethernet/IPv4/TCP-or-UDP frame with valid checksums.
#[allow(clippy::too_many_arguments)]
pub fn build_frame(
    dst_mac: [u8; 6],
    src_mac: [u8; 6],
    src: Ipv4Addr,
    dst: Ipv4Addr,
    protocol: u8,
    src_port: u16,
    dst_port: u16,
    ttl: u8,
    ip_id: u16,
    body: &[u8],
) -> Vec<u8> {
    let l4_len = if protocol == PROTO_TCP { 20 } else { 8 };
    let total = 20 + l4_len + body.len();
    let mut f = Vec::with_capacity(14 + total);
    f.extend_from_slice(&dst_mac);
    f.extend_from_slice(&src_mac);
    f.extend_from_slice(&[0x08, 0x00]);
    f.extend_from_slice(&[0x45, 0x00]);
    f.extend_from_slice(&(total as u16).to_be_bytes());
    f.extend_from_slice(&ip_id.to_be_bytes());
    f.extend_from_slice(&[0x40, 0x00, ttl, protocol, 0, 0]);
    f.extend_from_slice(&src.octets());
    f.extend_from_slice(&dst.octets());
    f.extend_from_slice(&src_port.to_be_bytes());
    f.extend_from_slice(&dst_port.to_be_bytes());
    if protocol == PROTO_TCP {
        let seq = (ip_id as u32).wrapping_mul(0x0001_0193);
        f.extend_from_slice(&seq.to_be_bytes());
        f.extend_from_slice(&seq.rotate_left(13).to_be_bytes());
        f.extend_from_slice(&[0x50, 0x18, 0xfa, 0xf0, 0, 0, 0, 0]);
    } else {
        f.extend_from_slice(&((8 + body.len()) as u16).to_be_bytes());
        f.extend_from_slice(&[0xff, 0xff]);
    }
    f.extend_from_slice(body);
    let view = Ipv4View::parse(&f, 14).expect("frame built above is well-formed");
    refresh_checksums(&mut f, &view);
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub flows_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            flows_per_class: 200,
            seed: 7,
        }
    }
}

pub fn class_name(class: usize) -> String {
    let base = TEMPLATE_NAMES[class % TEMPLATE_NAMES.len()];
    match class / TEMPLATE_NAMES.len() {
        0 => base.to_string(),
        round => format!("{base}-{round}"),
    }
}

fn ascii_word(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<u8> {
    let n = rng.random_range(min..=max);
    (0..n).map(|_| rng.random_range(b'a'..=b'z')).collect()
}

struct Template {
    protocol: u8,
    port: u16,
    /// Distinguishes the copies of one template when classes wrap around.
    variant: u8,
}

impl Template {
    fn for_class(class: usize) -> Self {
        let variant = (class / TEMPLATE_NAMES.len()) as u8;
        let (protocol, port) = match class % TEMPLATE_NAMES.len() {
            0 => (PROTO_TCP, 443),
            1 => (PROTO_UDP, 53),
            2 => (PROTO_TCP, 1883),
            _ => (PROTO_UDP, 5683),
        };
        Self {
            protocol,
            port: port + variant as u16 * 1000,
            variant,
        }
    }

    fn packet_count(&self, kind: usize, rng: &mut ChaCha8Rng) -> usize {
        match kind {
            0 => rng.random_range(3..=6),
            1 => rng.random_range(2..=4),
            2 => rng.random_range(6..=10),
            _ => rng.random_range(5..=9),
        }
    }

    fn body(&self, kind: usize, index: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let mut b = Vec::new();
        match kind {
            0 if index == 0 => {
                b.extend_from_slice(&[0x16, 0x03, 0x01, 0x00, 0xc8, 0x01, 0x00, 0x00, 0xc4]);
                b.extend_from_slice(&[0x03, 0x03]);
                b.extend((0..32).map(|_| rng.random::<u8>()));
                b.extend_from_slice(&[0x00, 0x00, 0x08, 0x13, 0x01, 0x13, 0x02, 0xc0, 0x2f]);
                b.extend_from_slice(&[0xc0, 0x30 ^ self.variant, 0x01, 0x00]);
                b.extend_from_slice(b"\x00\x00\x00\x10\x00\x0e\x00\x00\x0b");
                b.extend(ascii_word(rng, 6, 12));
                b.extend_from_slice(b".net");
            }
            0 => {
                let n = rng.random_range(180..=560);
                b.extend_from_slice(&[0x17, 0x03, 0x03]);
                b.extend_from_slice(&(n as u16).to_be_bytes());
                b.extend((0..n).map(|_| rng.random::<u8>()));
            }
            1 => {
                b.extend_from_slice(&rng.random::<u16>().to_be_bytes());
                b.extend_from_slice(&[0x01, self.variant, 0x00, 0x01, 0, 0, 0, 0, 0, 0]);
                for _ in 0..rng.random_range(1..=3) {
                    let label = ascii_word(rng, 3, 10);
                    b.push(label.len() as u8);
                    b.extend(label);
                }
                b.extend_from_slice(b"\x07example\x03com\x00");
                b.extend_from_slice(&[0x00, rng.random_range(1..=2) * 27 - 26, 0x00, 0x01]);
            }
            2 if index == 0 => {
                let id = ascii_word(rng, 8, 16);
                b.extend_from_slice(&[0x10, (10 + 2 + id.len()) as u8, 0x00, 0x04]);
                b.extend_from_slice(b"MQTT\x04\x02\x00\x3c");
                b.extend_from_slice(&(id.len() as u16).to_be_bytes());
                b.extend(id);
            }
            2 => {
                let rooms = [b"kitchen".as_slice(), b"garage", b"lab", b"hall"];
                let mut topic = b"sensors/".to_vec();
                topic.extend_from_slice(rooms[rng.random_range(0..rooms.len())]);
                topic.extend_from_slice(b"/temp");
                let reading = format!(
                    "{{\"t\":{:.1},\"h\":{}}}",
                    rng.random_range(15.0..30.0f64),
                    rng.random_range(20..80)
                );
                b.push(0x30 | self.variant);
                b.push((2 + topic.len() + reading.len()) as u8);
                b.extend_from_slice(&(topic.len() as u16).to_be_bytes());
                b.extend(topic);
                b.extend_from_slice(reading.as_bytes());
            }
            _ => {
                let token: u32 = rng.random();
                b.extend_from_slice(&[0x44, if index == 0 { 0x01 } else { 0x02 }]);
                b.extend_from_slice(&rng.random::<u16>().to_be_bytes());
                b.extend_from_slice(&token.to_be_bytes());
                b.extend_from_slice(b"\xb6sensor\x04data");
                b.push(0xff);
                let n = rng.random_range(24..=64);
                b.extend((0..n).map(|_| rng.random_range(0..64u8) + self.variant));
            }
        }
        b
    }
}

/// Writes `<out>/<class>/capture.pcap` for every class and returns the
/// class directories in label order.
pub fn synth_corpus(spec: &SynthSpec, out: &Path) -> Result<Vec<PathBuf>, TrafficError> {
    if spec.classes < 2 {
        return Err(TrafficError::Config(format!(
            "a synthetic corpus needs at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.flows_per_class == 0 {
        return Err(TrafficError::Config("flows per class must be positive".into()));
    }
    let mut dirs = Vec::with_capacity(spec.classes);
    for class in 0..spec.classes {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ((class as u64 + 1) << 48));
        let tpl = Template::for_class(class);
        let kind = class % TEMPLATE_NAMES.len();
        let server_net: u8 = rng.random_range(1..=223);
        let gateway_mac = [0x02, 0x42, 0xac, 0x11, 0x00, class as u8];
        let mut packets: Vec<RawPacket> = Vec::new();
        for _ in 0..spec.flows_per_class {
            let client = Ipv4Addr::new(10, rng.random(), rng.random(), rng.random_range(1..=254));
            let server = Ipv4Addr::new(server_net, rng.random(), rng.random(), rng.random_range(1..=254));
            let client_mac = [0x02, rng.random(), rng.random(), rng.random(), rng.random(), rng.random()];
            let sport = rng.random_range(32768..=60999);
            let ttl = [64u8, 128, 255][rng.random_range(0..3)];
            let mut ip_id: u16 = rng.random();
            let mut ts_us: u64 = 1_700_000_000_000_000 + rng.random_range(0..60_000_000);
            for i in 0..tpl.packet_count(kind, &mut rng) {
                let body = tpl.body(kind, i, &mut rng);
                let frame = build_frame(
                    gateway_mac,
                    client_mac,
                    client,
                    server,
                    tpl.protocol,
                    sport,
                    tpl.port,
                    ttl,
                    ip_id,
                    &body,
                );
                packets.push(RawPacket::new(
                    (ts_us / 1_000_000) as u32,
                    (ts_us % 1_000_000) as u32,
                    frame,
                ));
                ip_id = ip_id.wrapping_add(1);
                ts_us += rng.random_range(200..400_000);
            }
        }
        packets.sort_by_key(RawPacket::timestamp_us);
        let dir = out.join(class_name(class));
        fs::create_dir_all(&dir).map_err(|e| TrafficError::io(&dir, e))?;
        write_pcap(&dir.join("capture.pcap"), &Capture::new(LINKTYPE_ETHERNET, packets))?;
        dirs.push(dir);
    }
    Ok(dirs)
}
