//! Versioned binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DMLT" | format u32
//! schedule:  kind u32 (0 = cosine) | T u32 | T x beta f64
//! arch:      image_size u32 | in_channels u32 | widths 3 x u32 | embed_dim u32 | group_cap u32
//! meta:      step u64 | seed u64
//! tensors:   count u32, then per tensor:
//!            name_len u16 | name utf-8 | ndim u32 | dims ndim x u32 | data f32 x numel
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::ParamStore;
use super::schedule::NoiseSchedule;
use super::unet::{Architecture, Denoiser};
use super::DiffusionError;

pub const MAGIC: &[u8; 4] = b"DMLT";
pub const FORMAT_VERSION: u32 = 1;
const SCHEDULE_COSINE: u32 = 0;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format: u32,
    pub schedule: NoiseSchedule,
    pub net: Denoiser<f32>,
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(schedule: NoiseSchedule, net: Denoiser<f32>, step: u64, seed: u64) -> Self {
        Self {
            format: FORMAT_VERSION,
            schedule,
            net,
            step,
            seed,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);

        put_u32(&mut out, SCHEDULE_COSINE);
        put_u32(&mut out, self.schedule.timesteps() as u32);
        for b in self.schedule.betas() {
            out.extend_from_slice(&b.to_le_bytes());
        }

        let arch = self.net.arch();
        put_u32(&mut out, arch.image_size as u32);
        put_u32(&mut out, arch.in_channels as u32);
        for w in arch.widths {
            put_u32(&mut out, w as u32);
        }
        put_u32(&mut out, arch.embed_dim as u32);
        put_u32(&mut out, arch.group_cap as u32);

        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());

        let tensors = self.net.params().tensors();
        put_u32(&mut out, tensors.len() as u32);
        for t in tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            put_u32(&mut out, t.shape.len() as u32);
            for &d in &t.shape {
                put_u32(&mut out, d as u32);
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiffusionError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(DiffusionError::Checkpoint("bad magic, not a DMLT file".into()));
        }
        let format = r.u32()?;
        if format != FORMAT_VERSION {
            return Err(DiffusionError::Checkpoint(format!(
                "unsupported format version {format}"
            )));
        }
        let kind = r.u32()?;
        if kind != SCHEDULE_COSINE {
            return Err(DiffusionError::Checkpoint(format!("unknown schedule kind {kind}")));
        }
        let timesteps = r.u32()? as usize;
        let betas = (0..timesteps)
            .map(|_| r.f64())
            .collect::<Result<Vec<_>, _>>()?;
        let schedule = NoiseSchedule::from_betas(betas);

        let arch = Architecture {
            image_size: r.u32()? as usize,
            in_channels: r.u32()? as usize,
            widths: [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize],
            embed_dim: r.u32()? as usize,
            group_cap: r.u32()? as usize,
        };
        let step = r.u64()?;
        let seed = r.u64()?;

        let count = r.u32()? as usize;
        let mut store = ParamStore::<f32>::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| DiffusionError::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.push(name, shape, data);
        }
        if r.pos != bytes.len() {
            return Err(DiffusionError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let net = Denoiser::with_params(arch, store)?;
        Ok(Self {
            format,
            schedule,
            net,
            step,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffusionError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DiffusionError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DiffusionError> {
        if self.pos + n > self.bytes.len() {
            return Err(DiffusionError::Checkpoint(format!(
                "truncated checkpoint at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DiffusionError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DiffusionError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DiffusionError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::tensor::FeatureMap;
    use crate::diffusion::unet::LayerId;

    fn small() -> Checkpoint {
        let arch = Architecture {
            widths: [4, 6, 8],
            embed_dim: 8,
            ..Architecture::default()
        };
        Checkpoint::new(
            NoiseSchedule::cosine(20).unwrap(),
            Denoiser::new(arch, 4).unwrap(),
            17,
            4,
        )
    }

    #[test]
    fn roundtrip_gives_identical_predictions() {
        let ckpt = small();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.schedule, ckpt.schedule);
        assert_eq!(back.net.feature_layers(), ckpt.net.feature_layers());
        let x = FeatureMap::from_vec(1, 28, 28, (0..784).map(|i| (i % 13) as f32 / 7.0 - 1.0).collect());
        let (a, ta) = ckpt.net.forward(&x, 7).unwrap();
        let (b, tb) = back.net.forward(&x, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.pooled(LayerId::Dec1), tb.pooled(LayerId::Dec1));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = small().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
