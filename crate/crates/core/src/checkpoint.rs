//! `CDCK` checkpoint files.
//!
//! Layout (little-endian): magic, `u32` version, 32-byte SHA-256 of the
//! canonical config text, the config text (`u64` length + UTF-8), `u64`
//! epoch, `u64` RNG seed, `u64` RNG counter, the encoder (`u32` mode, then
//! weight matrix and bias for the adapter), the clustering head and its Adam
//! state, the calibration head and its Adam state, and the encoder Adam
//! state. Matrices are `u64` rows, `u64` cols, `f64` values; vectors are a
//! `u64` length followed by `f64` values.

use std::path::Path;

use crate::dataio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::heads::{AdamState, EncoderParams, HeadParams};
use crate::numerics::RngState;
use crate::trainer::{Checkpoint, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_head(w: &mut ByteWriter, h: &HeadParams) {
    w.matrix(&h.w1);
    w.f64s(&h.b1);
    w.f64s(&h.bn_gamma);
    w.f64s(&h.bn_beta);
    w.f64s(&h.bn_running_mean);
    w.f64s(&h.bn_running_var);
    w.matrix(&h.w2);
    w.f64s(&h.b2);
}

fn get_head(r: &mut ByteReader) -> Result<HeadParams> {
    Ok(HeadParams {
        w1: r.matrix("w1")?,
        b1: r.f64s("b1")?,
        bn_gamma: r.f64s("bn_gamma")?,
        bn_beta: r.f64s("bn_beta")?,
        bn_running_mean: r.f64s("bn_running_mean")?,
        bn_running_var: r.f64s("bn_running_var")?,
        w2: r.matrix("w2")?,
        b2: r.f64s("b2")?,
    })
}

fn put_adam(w: &mut ByteWriter, a: &AdamState) {
    w.u64(a.step);
    for v in [a.lr, a.beta1, a.beta2, a.eps] {
        w.f64(v);
    }
    w.u64(a.first_moment.len() as u64);
    for (m, v) in a.first_moment.iter().zip(&a.second_moment) {
        w.f64s(m);
        w.f64s(v);
    }
}

fn get_adam(r: &mut ByteReader) -> Result<AdamState> {
    let step = r.u64("adam step")?;
    let lr = r.f64("adam lr")?;
    let beta1 = r.f64("adam beta1")?;
    let beta2 = r.f64("adam beta2")?;
    let eps = r.f64("adam eps")?;
    let groups = r.len(16, "adam groups")?;
    let mut first_moment = Vec::with_capacity(groups);
    let mut second_moment = Vec::with_capacity(groups);
    for _ in 0..groups {
        first_moment.push(r.f64s("adam first moment")?);
        second_moment.push(r.f64s("adam second moment")?);
    }
    Ok(AdamState {
        step,
        lr,
        beta1,
        beta2,
        eps,
        first_moment,
        second_moment,
    })
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.bytes(&c.config.digest());
    let text = c.config.canonical_text();
    w.u64(text.len() as u64);
    w.bytes(text.as_bytes());
    w.u64(c.epoch as u64);
    w.u64(c.rng.seed());
    w.u64(c.rng.counter());
    match &c.encoder {
        EncoderParams::Identity => w.u32(0),
        EncoderParams::Adapter { weight, bias } => {
            w.u32(1);
            w.matrix(weight);
            w.f64s(bias);
        }
    }
    put_head(&mut w, &c.clu);
    put_adam(&mut w, &c.clu_adam);
    put_head(&mut w, &c.cal);
    put_adam(&mut w, &c.cal_adam);
    put_adam(&mut w, &c.enc_adam);
    w.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
    }
    let digest: [u8; 32] = r.take(32, "config digest")?.try_into().unwrap();
    let text_at = r.offset();
    let len = r.len(1, "config text")?;
    let text = std::str::from_utf8(r.take(len, "config text")?)
        .map_err(|_| Error::format(text_at, "config text is not UTF-8"))?;
    let config = TrainConfig::from_text(text)?;
    if config.digest() != digest {
        return Err(Error::format(text_at, "config digest does not match the stored config"));
    }
    let epoch = r.u64("epoch")? as usize;
    let rng = RngState::from_parts(r.u64("rng seed")?, r.u64("rng counter")?);
    let enc_at = r.offset();
    let encoder = match r.u32("encoder mode")? {
        0 => EncoderParams::Identity,
        1 => EncoderParams::Adapter {
            weight: r.matrix("encoder weight")?,
            bias: r.f64s("encoder bias")?,
        },
        m => return Err(Error::format(enc_at, format!("unknown encoder mode {m}"))),
    };
    let clu = get_head(&mut r)?;
    let clu_adam = get_adam(&mut r)?;
    let cal = get_head(&mut r)?;
    let cal_adam = get_adam(&mut r)?;
    let enc_adam = get_adam(&mut r)?;
    r.finish()?;
    let c = Checkpoint {
        config,
        epoch,
        rng,
        encoder,
        clu,
        clu_adam,
        cal,
        cal_adam,
        enc_adam,
    };
    c.validate()?;
    Ok(c)
}

pub fn write_checkpoint(path: impl AsRef<Path>, c: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(c)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_mixture, MixtureSpec};
    use crate::heads::EncoderMode;
    use crate::trainer::{predict, train};

    fn trained(encoder: EncoderMode) -> (Checkpoint, crate::Matrix) {
        let m = gen_mixture(&MixtureSpec {
            n: 120,
            d: 5,
            c: 3,
            separation: 5.0,
            seed: 1,
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 60,
            sub_batch: 30,
            mini_clusters: 6,
            classes: 3,
            hidden: 8,
            encoder,
            ..TrainConfig::default()
        };
        (train(&m.features, None, &cfg).unwrap().checkpoint, m.features)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in [EncoderMode::Adapter, EncoderMode::Identity] {
            let (c, x) = trained(mode);
            let bytes = encode_checkpoint(&c);
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(encode_checkpoint(&back), bytes);
            let a = predict(&c, &x).unwrap();
            let b = predict(&back, &x).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let (c, _) = trained(EncoderMode::Adapter);
        let bytes = encode_checkpoint(&c);
        for cut in [3, 20, 100, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        let mut digest = bytes.clone();
        digest[10] ^= 1;
        assert!(decode_checkpoint(&digest).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn file_round_trip() {
        let (c, _) = trained(EncoderMode::Adapter);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.cdck");
        write_checkpoint(&p, &c).unwrap();
        assert_eq!(read_checkpoint(&p).unwrap(), c);
    }
}
