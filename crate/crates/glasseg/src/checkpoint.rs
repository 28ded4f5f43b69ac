//! Binary checkpoint format with a bit-exact round trip.
//!
//! Layout (all integers little endian):
//! magic "GSEGCKPT" | schema version u32 | scalar width u8 | net config JSON
//! (u64 length + bytes) | train config JSON | iteration u64 | parameters
//! (name, decay flag, shape, value bytes, momentum bytes) | buffers (name,
//! shape, value bytes). Tensor data is stored as raw little-endian scalars,
//! so save -> load reproduces forward outputs exactly.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::network::{GlassNet, NetConfig};
use crate::pipeline::TrainConfig;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"GSEGCKPT";
pub const SCHEMA_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_tensor<F: Scalar>(out: &mut Vec<u8>, t: &ArrayD<F>) {
    put_u64(out, t.ndim() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.iter() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 name".into()))
    }

    fn tensor<F: Scalar>(&mut self) -> Result<ArrayD<F>> {
        let ndim = self.u64()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * F::BYTES)?;
        let data: Vec<F> = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
        ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
    }
}

pub fn save<F: Scalar>(
    path: &Path,
    net: &GlassNet<F>,
    train: &TrainConfig,
    iteration: u64,
) -> Result<()> {
    let net_json = serde_json::to_vec(&net.config)
        .map_err(|e| Error::Checkpoint(format!("net config serialization: {e}")))?;
    let train_json = serde_json::to_vec(train)
        .map_err(|e| Error::Checkpoint(format!("train config serialization: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, SCHEMA_VERSION);
    out.push(F::BYTES as u8);
    put_bytes(&mut out, &net_json);
    put_bytes(&mut out, &train_json);
    put_u64(&mut out, iteration);

    put_u64(&mut out, net.store.iter_params().count() as u64);
    for p in net.store.iter_params() {
        put_bytes(&mut out, p.name.as_bytes());
        out.push(p.decay as u8);
        put_tensor(&mut out, &p.value);
        put_tensor(&mut out, &p.momentum);
    }
    put_u64(&mut out, net.store.iter_buffers().count() as u64);
    for b in net.store.iter_buffers() {
        put_bytes(&mut out, b.name.as_bytes());
        put_tensor(&mut out, &b.value);
    }

    std::fs::write(path, out)?;
    Ok(())
}

pub struct Loaded<F: Scalar> {
    pub net: GlassNet<F>,
    pub train: TrainConfig,
    pub iteration: u64,
}

pub fn load<F: Scalar>(path: &Path) -> Result<Loaded<F>> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "schema version {version}, expected {SCHEMA_VERSION}"
        )));
    }
    let width = r.u8()? as usize;
    if width != F::BYTES {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {width}-byte scalars, loader expects {}",
            F::BYTES
        )));
    }
    let net_config: NetConfig = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::Checkpoint(format!("net config: {e}")))?;
    let train: TrainConfig = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::Checkpoint(format!("train config: {e}")))?;
    let iteration = r.u64()?;

    // Rebuild the network, then overwrite every tensor in place. Name and
    // shape agreement guards against config/weight mismatches.
    let mut net = GlassNet::<F>::new(net_config)?;
    let n_params = r.u64()? as usize;
    if n_params != net.store.num_params() {
        return Err(Error::Checkpoint(format!(
            "{n_params} parameters in file, model has {}",
            net.store.num_params()
        )));
    }
    for p in net.store.params.iter_mut() {
        let name = r.string()?;
        let decay = r.u8()? != 0;
        let value = r.tensor::<F>()?;
        let momentum = r.tensor::<F>()?;
        if name != p.name || decay != p.decay || value.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch at {name} (model expects {})",
                p.name
            )));
        }
        p.value = value;
        p.momentum = momentum;
    }
    let n_buffers = r.u64()? as usize;
    if n_buffers != net.store.buffers.len() {
        return Err(Error::Checkpoint("buffer count mismatch".into()));
    }
    for b in net.store.buffers.iter_mut() {
        let name = r.string()?;
        let value = r.tensor::<F>()?;
        if name != b.name || value.shape() != b.value.shape() {
            return Err(Error::Checkpoint(format!("buffer mismatch at {name}")));
        }
        b.value = value;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Loaded {
        net,
        train,
        iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::network::NetConfig;

    fn small_net() -> GlassNet<f32> {
        let mut cfg = NetConfig::tiny();
        cfg.backbone.stage_channels = [4, 8, 12, 16];
        cfg.de_out_channels = [4, 8, 12, 16];
        GlassNet::new(cfg).unwrap()
    }

    fn random_image(seed: u64) -> ArrayD<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[1, 3, 64, 64]), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut net = small_net();
        let image = random_image(5);
        let before = net.predict(&image).unwrap();
        save(&path, &net, &TrainConfig::default(), 123).unwrap();

        let mut loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.iteration, 123);
        assert_eq!(loaded.net.config, net.config);
        let after = loaded.net.predict(&image).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn corrupted_and_mismatched_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let net = small_net();
        save(&path, &net, &TrainConfig::default(), 0).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load::<f32>(&bad), Err(Error::Checkpoint(_))));

        let mut truncated = std::fs::read(&path).unwrap();
        truncated.truncate(truncated.len() / 2);
        std::fs::write(&bad, &truncated).unwrap();
        assert!(load::<f32>(&bad).is_err());

        // f64 loader against an f32 file.
        assert!(matches!(load::<f64>(&path), Err(Error::Checkpoint(_))));
    }
}
