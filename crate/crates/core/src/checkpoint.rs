//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "ADVSYN1\n" | version u32 | kind str
//! metadata: u32 count, (key str, value str)*
//! tensors:  u32 count, (name str, dtype u8 = 1 (f64), rank u32, dims u64*, data f64*)*
//! floats:   u32 count, (name str, len u64, f64*)*
//! ints:     u32 count, (name str, len u64, u64*)*
//! rngs:     u32 count, (name str, seed u64, stream u64, word_pos u128)*
//! checksum: FNV-1a 64 of every preceding byte, u64
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use indexmap::IndexMap;

use crate::classifier::{ClassifierConfig, TrainReport};
use crate::dcgan::{BatchSampler, GanConfig, GanModel, GanTrainer, StepLosses};
use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec, ParamStore};
use crate::optim::{AdamConfig, AdamState, Moments};
use crate::rng::{Rng, RngState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ADVSYN1\n";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

pub const KIND_GAN: &str = "gan";
pub const KIND_CLASSIFIER: &str = "classifier";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub metadata: IndexMap<String, String>,
    pub tensors: IndexMap<String, Tensor>,
    pub floats: IndexMap<String, Vec<f64>>,
    pub ints: IndexMap<String, Vec<u64>>,
    pub rngs: IndexMap<String, RngState>,
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(
            self.take(16)?.try_into().expect("16 bytes"),
        ))
    }
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(unit)
            .is_none_or(|b| b > self.bytes.len() - self.pos)
        {
            return Err(Error::format(
                self.path,
                format!("length {n} exceeds file size"),
            ));
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8 string"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint {
            kind: kind.into(),
            ..Checkpoint::default()
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.u32(VERSION);
        w.str(&self.kind);
        w.u32(self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            w.str(k);
            w.str(v);
        }
        w.u32(self.tensors.len() as u32);
        for (k, t) in &self.tensors {
            w.str(k);
            w.0.push(DTYPE_F64);
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        w.u32(self.floats.len() as u32);
        for (k, v) in &self.floats {
            w.str(k);
            w.u64(v.len() as u64);
            w.f64s(v);
        }
        w.u32(self.ints.len() as u32);
        for (k, v) in &self.ints {
            w.str(k);
            w.u64(v.len() as u64);
            for &x in v {
                w.u64(x);
            }
        }
        w.u32(self.rngs.len() as u32);
        for (k, s) in &self.rngs {
            w.str(k);
            w.u64(s.seed);
            w.u64(s.stream);
            w.0.extend_from_slice(&s.word_pos.to_le_bytes());
        }
        let sum = checksum(&w.0);
        w.u64(sum);
        w.0
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = checksum(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
            path,
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let mut ck = Checkpoint::new(&r.str()?);
        for _ in 0..r.u32()? {
            let k = r.str()?;
            ck.metadata.insert(k, r.str()?);
        }
        for _ in 0..r.u32()? {
            let name = r.str()?;
            if r.u8()? != DTYPE_F64 {
                return Err(Error::format(path, format!("tensor {name}: unknown dtype")));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = match n {
                Some(n) if n * 8 <= body.len() - r.pos => n,
                _ => {
                    return Err(Error::format(
                        path,
                        format!("tensor {name}: bad dimensions {dims:?}"),
                    ))
                }
            };
            let data = r.f64s(n)?;
            let t = Tensor::new(&dims, data)
                .map_err(|e| Error::format(path, format!("tensor {name}: {e}")))?;
            ck.tensors.insert(name, t);
        }
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let n = r.len(8)?;
            ck.floats.insert(name, r.f64s(n)?);
        }
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let n = r.len(8)?;
            let v = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            ck.ints.insert(name, v);
        }
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let state = RngState {
                seed: r.u64()?,
                stream: r.u64()?,
                word_pos: r.u128()?,
            };
            ck.rngs.insert(name, state);
        }
        if r.pos != body.len() {
            return Err(Error::format(path, "trailing bytes before checksum"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Data(format!(
                "checkpoint holds a {} model, expected {kind}",
                self.kind
            )));
        }
        Ok(())
    }

    fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("checkpoint metadata lacks {key}")))
    }

    fn json<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        serde_json::from_str(self.meta(key)?)
            .map_err(|e| Error::Data(format!("checkpoint metadata {key}: {e}")))
    }

    fn int(&self, key: &str) -> Result<u64> {
        match self.ints.get(key).map(Vec::as_slice) {
            Some([v]) => Ok(*v),
            _ => Err(Error::Data(format!("checkpoint lacks counter {key}"))),
        }
    }

    fn rng(&self, key: &str) -> Result<Rng> {
        self.rngs
            .get(key)
            .map(|s| Rng::from_state(*s))
            .ok_or_else(|| Error::Data(format!("checkpoint lacks rng {key}")))
    }

    fn put_json<T: serde::Serialize>(&mut self, key: &str, value: &T) {
        let s = serde_json::to_string(value).expect("config serializes");
        self.metadata.insert(key.into(), s);
    }

    fn put_network(&mut self, prefix: &str, net: &Network) {
        self.put_json(&format!("{prefix}spec"), &net.spec);
        for (k, t) in &net.store.params {
            self.tensors.insert(format!("{prefix}param/{k}"), t.clone());
        }
        for (k, t) in &net.store.buffers {
            self.tensors
                .insert(format!("{prefix}buffer/{k}"), t.clone());
        }
    }

    fn network(&self, prefix: &str) -> Result<Network> {
        let spec: NetworkSpec = self.json(&format!("{prefix}spec"))?;
        let mut store = ParamStore::default();
        for (k, t) in &self.tensors {
            if let Some(name) = k.strip_prefix(&format!("{prefix}param/")) {
                store.params.insert(name.into(), t.clone());
            } else if let Some(name) = k.strip_prefix(&format!("{prefix}buffer/")) {
                store.buffers.insert(name.into(), t.clone());
            }
        }
        Network::from_parts(spec, store)
    }

    fn put_adam(&mut self, prefix: &str, opt: &AdamState) {
        self.put_json(&format!("{prefix}adam"), &opt.config);
        self.ints.insert(format!("{prefix}adam_t"), vec![opt.t]);
        for (k, m) in &opt.moments {
            self.tensors
                .insert(format!("{prefix}adam_m/{k}"), m.m.clone());
            self.tensors
                .insert(format!("{prefix}adam_v/{k}"), m.v.clone());
        }
    }

    fn adam(&self, prefix: &str) -> Result<AdamState> {
        let config: AdamConfig = self.json(&format!("{prefix}adam"))?;
        let mut opt = AdamState::new(config);
        opt.t = self.int(&format!("{prefix}adam_t"))?;
        let m_prefix = format!("{prefix}adam_m/");
        for (k, m) in &self.tensors {
            if let Some(name) = k.strip_prefix(&m_prefix) {
                let v = self
                    .tensors
                    .get(&format!("{prefix}adam_v/{name}"))
                    .ok_or_else(|| {
                        Error::Data(format!("checkpoint lacks second moment for {name}"))
                    })?;
                opt.moments.insert(
                    name.into(),
                    Moments {
                        m: m.clone(),
                        v: v.clone(),
                    },
                );
            }
        }
        Ok(opt)
    }
}

/// Everything needed to continue a GAN run bit-for-bit.
pub fn gan_checkpoint(trainer: &GanTrainer) -> Checkpoint {
    let model = &trainer.model;
    let mut ck = Checkpoint::new(KIND_GAN);
    ck.put_json("config", &model.config);
    ck.put_network("g/", &model.generator);
    ck.put_network("d/", &model.discriminator);
    ck.put_adam("g/", &model.g_opt);
    ck.put_adam("d/", &model.d_opt);
    ck.ints.insert("step".into(), vec![model.step]);
    ck.ints.insert(
        "sampler_order".into(),
        trainer.sampler.order.iter().map(|&i| i as u64).collect(),
    );
    ck.ints
        .insert("sampler_cursor".into(), vec![trainer.sampler.cursor as u64]);
    ck.rngs.insert("noise".into(), trainer.noise.state());
    ck.rngs
        .insert("shuffle".into(), trainer.sampler.rng.state());
    ck.floats.insert(
        "d_loss".into(),
        trainer.log.iter().map(|l| l.d_loss).collect(),
    );
    ck.floats.insert(
        "g_loss".into(),
        trainer.log.iter().map(|l| l.g_loss).collect(),
    );
    ck
}

pub fn restore_gan(ck: &Checkpoint) -> Result<GanTrainer> {
    ck.expect_kind(KIND_GAN)?;
    let config: GanConfig = ck.json("config")?;
    config.validate()?;
    let model = GanModel {
        generator: ck.network("g/")?,
        discriminator: ck.network("d/")?,
        g_opt: ck.adam("g/")?,
        d_opt: ck.adam("d/")?,
        step: ck.int("step")?,
        config,
    };
    let order: Vec<usize> = ck
        .ints
        .get("sampler_order")
        .ok_or_else(|| Error::Data("checkpoint lacks sampler order".into()))?
        .iter()
        .map(|&i| i as usize)
        .collect();
    let cursor = ck.int("sampler_cursor")? as usize;
    if order.is_empty() || cursor > order.len() {
        return Err(Error::Data(
            "checkpoint sampler state is inconsistent".into(),
        ));
    }
    let empty = Vec::new();
    let d = ck.floats.get("d_loss").unwrap_or(&empty);
    let g = ck.floats.get("g_loss").unwrap_or(&empty);
    if d.len() != g.len() {
        return Err(Error::Data("checkpoint loss logs differ in length".into()));
    }
    Ok(GanTrainer {
        model,
        noise: ck.rng("noise")?,
        sampler: BatchSampler {
            order,
            cursor,
            rng: ck.rng("shuffle")?,
        },
        log: d
            .iter()
            .zip(g)
            .map(|(&d_loss, &g_loss)| StepLosses { d_loss, g_loss })
            .collect(),
    })
}

pub fn classifier_checkpoint(
    net: &Network,
    config: &ClassifierConfig,
    report: Option<&TrainReport>,
) -> Checkpoint {
    let mut ck = Checkpoint::new(KIND_CLASSIFIER);
    ck.put_json("config", config);
    if let Some(r) = report {
        ck.put_json("report", r);
    }
    ck.put_network("", net);
    ck
}

pub fn restore_classifier(ck: &Checkpoint) -> Result<(Network, ClassifierConfig)> {
    ck.expect_kind(KIND_CLASSIFIER)?;
    let config: ClassifierConfig = ck.json("config")?;
    Ok((ck.network("")?, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("test");
        ck.metadata.insert("a".into(), "b".into());
        ck.tensors
            .insert("t".into(), Tensor::from_fn(&[2, 3], |i| i as f64 - 0.5));
        ck.floats.insert("f".into(), vec![]);
        ck.ints.insert("i".into(), vec![7, u64::MAX]);
        let mut rng = Rng::new(3, stream::NOISE);
        rng.next_u64();
        ck.rngs.insert("r".into(), rng.state());
        ck
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let bytes = ck.encode();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::decode(&bytes, Path::new("x")).unwrap(), ck);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().encode();
        bytes[20] ^= 0x40;
        let err = Checkpoint::decode(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }), "{err}");
        assert!(Checkpoint::decode(b"nope", Path::new("x")).is_err());
    }

    #[test]
    fn gan_round_trip() {
        let cfg = GanConfig {
            z_dim: 4,
            image_size: 32,
            base_channels: 8,
            ..GanConfig::default()
        };
        let trainer = GanTrainer::new(&cfg, 5).unwrap();
        let back = restore_gan(&gan_checkpoint(&trainer)).unwrap();
        assert_eq!(back, trainer);
        assert!(restore_classifier(&gan_checkpoint(&trainer)).is_err());
    }
}
