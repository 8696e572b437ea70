//! PKVW weight file.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic        b"PKVW"
//! version      u32 (= 1)
//! num_layers   u32
//! num_heads    u32
//! head_dim     u32
//! hidden_dim   u32
//! vocab_size   u32
//! max_seq_len  u32
//! rope_base    f32
//! embed        vocab x d
//! per layer:   attn_norm (d), wq, wk, wv, wo (d x d),
//!              mlp_norm (d), w_up (d x 4d), w_down (4d x d)
//! final_norm   d
//! unembed      d x vocab
//! ```
//!
//! Every matrix is stored row-major as raw `f32` with no per-matrix header.

use std::io::{Read, Write};

use super::{DecoderConfig, DecoderWeights, LayerWeights};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const WEIGHT_MAGIC: &[u8; 4] = b"PKVW";
pub const WEIGHT_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s<W: Write>(w: &mut W, vals: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_weights<W: Write>(mut w: W, weights: &DecoderWeights) -> Result<()> {
    weights.validate()?;
    let c = &weights.config;
    w.write_all(WEIGHT_MAGIC)?;
    w.write_all(&WEIGHT_VERSION.to_le_bytes())?;
    for v in [
        c.num_layers,
        c.num_heads,
        c.head_dim,
        c.hidden_dim,
        c.vocab_size,
        c.max_seq_len,
    ] {
        put_u32(&mut w, v)?;
    }
    w.write_all(&c.rope_base.to_le_bytes())?;
    put_f32s(&mut w, weights.embed.data())?;
    for l in &weights.layers {
        put_f32s(&mut w, &l.attn_norm)?;
        for m in [&l.wq, &l.wk, &l.wv, &l.wo] {
            put_f32s(&mut w, m.data())?;
        }
        put_f32s(&mut w, &l.mlp_norm)?;
        put_f32s(&mut w, l.w_up.data())?;
        put_f32s(&mut w, l.w_down.data())?;
    }
    put_f32s(&mut w, &weights.final_norm)?;
    put_f32s(&mut w, weights.unembed.data())?;
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated weight file reading {what}: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut raw = vec![0u8; n * 4];
        self.inner
            .read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated weight file reading {what}: {e}")))?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.f32s(rows * cols, what)?)
    }
}

pub fn read_weights<R: Read>(r: R) -> Result<DecoderWeights> {
    let mut r = Reader { inner: r };
    let magic = r.bytes::<4>("magic")?;
    if &magic != WEIGHT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected PKVW")));
    }
    let version = r.u32("version")?;
    if version != WEIGHT_VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported weight version {version}"
        )));
    }
    let config = DecoderConfig {
        num_layers: r.u32("num_layers")?,
        num_heads: r.u32("num_heads")?,
        head_dim: r.u32("head_dim")?,
        hidden_dim: r.u32("hidden_dim")?,
        vocab_size: r.u32("vocab_size")?,
        max_seq_len: r.u32("max_seq_len")?,
        rope_base: f32::from_le_bytes(r.bytes::<4>("rope_base")?),
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    let d = config.hidden_dim;
    let m = config.mlp_dim();
    let embed = r.matrix(config.vocab_size, d, "embed")?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for i in 0..config.num_layers {
        let attn_norm = r.f32s(d, &format!("layer {i} attn_norm"))?;
        let wq = r.matrix(d, d, &format!("layer {i} wq"))?;
        let wk = r.matrix(d, d, &format!("layer {i} wk"))?;
        let wv = r.matrix(d, d, &format!("layer {i} wv"))?;
        let wo = r.matrix(d, d, &format!("layer {i} wo"))?;
        let mlp_norm = r.f32s(d, &format!("layer {i} mlp_norm"))?;
        let w_up = r.matrix(d, m, &format!("layer {i} w_up"))?;
        let w_down = r.matrix(m, d, &format!("layer {i} w_down"))?;
        layers.push(LayerWeights {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            mlp_norm,
            w_up,
            w_down,
        });
    }
    let final_norm = r.f32s(d, "final_norm")?;
    let unembed = r.matrix(d, config.vocab_size, "unembed")?;
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after weight payload".into()));
    }
    let weights = DecoderWeights {
        config,
        embed,
        layers,
        final_norm,
        unembed,
    };
    weights
        .validate()
        .map_err(|e| Error::Format(format!("invalid weights: {e}")))?;
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn sample() -> DecoderWeights {
        init_weights(&DecoderConfig::new(2, 2, 4, 16, 32), 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let w = sample();
        let mut buf = Vec::new();
        write_weights(&mut buf, &w).unwrap();
        let back = read_weights(buf.as_slice()).unwrap();
        assert_eq!(back, w);
        let mut again = Vec::new();
        write_weights(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_weights(&mut buf, &sample()).unwrap();
        assert_eq!(&buf[..4], b"PKVW");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(
            f32::from_le_bytes(buf[32..36].try_into().unwrap()),
            10_000.0
        );
        // header + vocab*d + layers*(2d + 4d² + 8d²) + d + d*vocab floats
        let d = 8;
        let floats = 16 * d + 2 * (2 * d + 4 * d * d + 8 * d * d) + d + d * 16;
        assert_eq!(buf.len(), 36 + floats * 4);
    }

    #[test]
    fn rejects_bad_magic_truncation_and_trailing() {
        let mut buf = Vec::new();
        write_weights(&mut buf, &sample()).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_weights(bad.as_slice()),
            Err(Error::Format(_))
        ));

        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_weights(short), Err(Error::Format(_))));

        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(
            read_weights(long.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
