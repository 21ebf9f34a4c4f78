//! MFGC checkpoint files.
//!
//! ```text
//! "MFGC" 0x01
//! u32 dim, d_ff, latent, vae_hidden, heads, vae_depth, tokens
//! u8 activation (0 relu, 1 tanh), u8 positional, u8 toggles (bit 0 sfm, 1 ifm, 2 vsgm)
//! u32 len, fingerprint bytes (UTF-8)
//! u32 tensor count
//! per tensor: u32 name_len, name bytes, u64 count, count × f32
//! ```
//!
//! Integers and floats are little-endian. Tensors appear in the order of
//! [`ModelParams::named`] and must match the header dimensions exactly.

use std::fs;
use std::path::Path;

use crate::data::fseb::Reader;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams, Toggles};
use crate::reconstruction::Activation;

pub const MAGIC: &[u8; 4] = b"MFGC";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Modules that were enabled during training.
    pub toggles: Toggles,
    /// Fingerprint of the configuration that produced the parameters.
    pub config_fingerprint: String,
}

impl Checkpoint {
    /// Content hash of the encoded checkpoint.
    pub fn fingerprint(&self) -> String {
        crate::config::short_hash(&encode(self))
    }
}

fn put_u32(out: &mut Vec<u8>, x: usize) {
    out.extend_from_slice(&(x as u32).to_le_bytes());
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let p = &ck.params;
    let d = &p.dims;
    let mut out = Vec::with_capacity(64 + p.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for x in [d.dim, d.d_ff, d.latent, d.vae_hidden, d.heads, d.vae_depth, d.tokens] {
        put_u32(&mut out, x);
    }
    out.push(match d.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    out.push(d.positional as u8);
    let t = ck.toggles;
    out.push(t.sfm as u8 | (t.ifm as u8) << 1 | (t.vsgm as u8) << 2);
    put_u32(&mut out, ck.config_fingerprint.len());
    out.extend_from_slice(ck.config_fingerprint.as_bytes());
    let named = p.named();
    put_u32(&mut out, named.len());
    for (name, t) in named {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}, expected \"MFGC\"")));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut h = [0usize; 7];
    for (x, what) in h.iter_mut().zip(["dim", "d_ff", "latent", "vae_hidden", "heads", "vae_depth", "tokens"]) {
        *x = r.u32(what)? as usize;
    }
    let activation = match r.u8("activation")? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        other => return Err(Error::Schema(format!("unknown activation code {other}"))),
    };
    let positional = match r.u8("positional flag")? {
        0 => false,
        1 => true,
        other => return Err(Error::Schema(format!("positional flag {other} is not 0 or 1"))),
    };
    let bits = r.u8("toggles")?;
    if bits > 7 {
        return Err(Error::Schema(format!("toggle bits {bits:#04x} out of range")));
    }
    let toggles = Toggles {
        sfm: bits & 1 != 0,
        ifm: bits & 2 != 0,
        vsgm: bits & 4 != 0,
    };
    let fp_len = r.u32("fingerprint length")? as usize;
    let fp = r.take(fp_len, "fingerprint")?;
    let config_fingerprint = String::from_utf8(fp.to_vec())
        .map_err(|_| Error::Schema("fingerprint is not UTF-8".into()))?;

    let dims = ModelDims {
        dim: h[0],
        d_ff: h[1],
        latent: h[2],
        vae_hidden: h[3],
        heads: h[4],
        vae_depth: h[5],
        tokens: h[6],
        activation,
        positional,
    };
    dims.validate().map_err(|e| Error::Schema(format!("checkpoint header: {e}")))?;
    let mut params = ModelParams::zeros(dims)?;

    let count = r.u32("tensor count")? as usize;
    let expected = params.named().len();
    if count != expected {
        return Err(Error::Schema(format!("{count} tensors stored, the header dims need {expected}")));
    }
    for (name, t) in params.named_mut() {
        let len = r.u32("tensor name length")? as usize;
        let stored = r.take(len, "tensor name")?;
        if stored != name.as_bytes() {
            return Err(Error::Schema(format!(
                "expected tensor {name}, found {:?}",
                String::from_utf8_lossy(stored)
            )));
        }
        let n = r.u64("value count")?;
        if n != t.len() as u64 {
            return Err(Error::Schema(format!("tensor {name} holds {n} values, expected {}", t.len())));
        }
        let values = r.f32s(t.len(), "tensor values")?;
        t.data_mut().copy_from_slice(&values);
    }
    r.finish()?;
    Ok(Checkpoint {
        params,
        toggles,
        config_fingerprint,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Loads a checkpoint and checks that its dimensions equal `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelDims) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    check_dims(&ck.params.dims, expected)?;
    Ok(ck)
}

pub fn check_dims(found: &ModelDims, expected: &ModelDims) -> Result<()> {
    let pairs = [
        ("dim", found.dim, expected.dim),
        ("d_ff", found.d_ff, expected.d_ff),
        ("latent", found.latent, expected.latent),
        ("vae_hidden", found.vae_hidden, expected.vae_hidden),
        ("heads", found.heads, expected.heads),
        ("vae_depth", found.vae_depth, expected.vae_depth),
        ("tokens", found.tokens, expected.tokens),
    ];
    for (name, f, e) in pairs {
        if f != e {
            return Err(Error::Schema(format!("checkpoint has {name} {f}, configuration expects {name} {e}")));
        }
    }
    if found.activation != expected.activation || found.positional != expected.positional {
        return Err(Error::Schema(format!(
            "checkpoint uses activation {} / positional {}, configuration expects {} / {}",
            found.activation.name(),
            found.positional,
            expected.activation.name(),
            expected.positional
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Checkpoint {
        Checkpoint {
            params: ModelParams::init(ModelDims::toy(), 9).unwrap(),
            toggles: Toggles { sfm: true, ifm: false, vsgm: true },
            config_fingerprint: "0123abcd".into(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = toy();
        let bytes = encode(&ck);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn dim_mismatch_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&toy(), &p).unwrap();
        let mut want = ModelDims::toy();
        want.dim = 16;
        match load_checkpoint_for(&p, &want) {
            Err(Error::Schema(msg)) => assert!(msg.contains("dim 8") && msg.contains("dim 16"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let bytes = encode(&toy());
        for cut in [0, 3, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Corruption { .. })), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(1);
        assert!(matches!(decode(&long), Err(Error::Corruption { .. })));
    }

    #[test]
    fn bad_header() {
        let mut bytes = encode(&toy());
        bytes[0] = b'Z';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        let mut bytes = encode(&toy());
        bytes[5] = 3; // dim 3 with 2 heads
        assert!(matches!(decode(&bytes), Err(Error::Schema(_))));
    }
}
