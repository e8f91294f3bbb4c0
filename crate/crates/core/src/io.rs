//! Binary container formats.
//!
//! Four little-endian containers share the same conventions: a four-byte
//! magic, a `u32` format version, then length-prefixed payloads. Strings are
//! `u32` byte length + UTF-8; float arrays are raw `f32` little-endian.
//!
//! * `MCGA` — a hyperspectral cube (`[C, H, W]`, channel-major).
//! * `MCCB` — a codebook mixture: per scale `{scale_index, n_entries, dim,
//!   entry matrix}`, followed by a per-scale source table mapping row ranges
//!   back to their originating dataset tags.
//! * `MCS1` — a stage-1 checkpoint: canonical config JSON, the embedded
//!   `MCCB` blob, and the named parameter blocks `{name, shape, f32 data}`.
//! * `MCS2` — a stage-2 checkpoint: an embedded `MCS1` (carrying the mixed
//!   codebooks, so the file is self-contained), the stage-2 parameter
//!   blocks, and the manifest of parameter names eligible for test-time
//!   adaptation.
//!
//! Reads and writes round-trip bit-exactly; offsets in parse errors are
//! relative to the blob being parsed (the embedded blob for nested formats).

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::codebook::{MixedCodebook, MixtureOfCodebooks};
use crate::data::HsiCube;
use crate::error::{Error, Result};
use crate::optim::{ParamEntry, ParamStore};
use crate::tensor::Scalar;

pub const CUBE_MAGIC: [u8; 4] = *b"MCGA";
pub const BOOKS_MAGIC: [u8; 4] = *b"MCCB";
pub const STAGE1_MAGIC: [u8; 4] = *b"MCS1";
pub const STAGE2_MAGIC: [u8; 4] = *b"MCS2";
pub const FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Byte-level helpers

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    out.reserve(vals.len() * 4);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_blob(out: &mut Vec<u8>, blob: &[u8]) {
    put_u32(out, blob.len() as u32);
    out.extend_from_slice(blob);
}

/// Forward-only reader over a byte slice that reports precise offsets.
struct Cur<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Cur<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cur { buf, off: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.off < n {
            return Err(Error::Truncated {
                offset: self.off as u64,
                expected: (n - (self.buf.len() - self.off)) as u64,
            });
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let at = self.off as u64;
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::BadMagic {
                offset: at,
                expected,
                found: [got[0], got[1], got[2], got[3]],
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::BadVersion {
                expected: FORMAT_VERSION,
                found: v,
            });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn usize32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.usize32()?;
        let at = self.off as u64;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Arg(format!("invalid UTF-8 string at offset {at}")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::DimOverflow(format!("{n} floats overflow usize")))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.usize32()?;
        self.take(n)
    }

    fn finish(&self) -> Result<()> {
        if self.off != self.buf.len() {
            return Err(Error::Arg(format!(
                "{} unexpected trailing bytes at offset {}",
                self.buf.len() - self.off,
                self.off
            )));
        }
        Ok(())
    }
}

fn checked_numel(parts: &[usize]) -> Result<usize> {
    parts.iter().try_fold(1usize, |acc, &p| {
        acc.checked_mul(p)
            .ok_or_else(|| Error::DimOverflow(format!("extents {parts:?} overflow usize")))
    })
}

/// JSON with lexicographically sorted object keys, so equal configs always
/// serialize to identical bytes.
pub fn canonical_json<S: Serialize>(value: &S) -> Result<String> {
    // serde_json's default map is a BTreeMap, so going through Value sorts
    // the keys of every object.
    let v = serde_json::to_value(value)?;
    Ok(v.to_string())
}

// ---------------------------------------------------------------------------
// MCGA cubes

pub fn cube_bytes(cube: &HsiCube) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + cube.data.len() * 4);
    out.extend_from_slice(&CUBE_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, cube.c as u32);
    put_u32(&mut out, cube.h as u32);
    put_u32(&mut out, cube.w as u32);
    put_f32s(&mut out, &cube.data);
    out
}

pub fn parse_cube(bytes: &[u8]) -> Result<HsiCube> {
    let mut cur = Cur::new(bytes);
    cur.magic(CUBE_MAGIC)?;
    cur.version()?;
    let c = cur.usize32()?;
    let h = cur.usize32()?;
    let w = cur.usize32()?;
    let numel = checked_numel(&[c, h, w])?;
    let data = cur.f32s(numel)?;
    cur.finish()?;
    HsiCube::new(c, h, w, data)
}

pub fn write_cube<P: AsRef<Path>>(path: P, cube: &HsiCube) -> Result<()> {
    Ok(std::fs::write(path, cube_bytes(cube))?)
}

pub fn read_cube<P: AsRef<Path>>(path: P) -> Result<HsiCube> {
    parse_cube(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// MCCB codebook mixtures

pub fn mixture_bytes(mix: &MixtureOfCodebooks) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&BOOKS_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, mix.scales.len() as u32);
    for s in &mix.scales {
        put_u32(&mut out, s.scale_index);
        put_u32(&mut out, s.n_entries() as u32);
        put_u32(&mut out, s.dim as u32);
        put_f32s(&mut out, &s.vectors);
    }
    // Trailing source table: which row ranges of each scale came from which
    // dataset tag, in concatenation order.
    for s in &mix.scales {
        put_u32(&mut out, s.sources.len() as u32);
        for (tag, rows) in &s.sources {
            put_string(&mut out, tag);
            put_u32(&mut out, *rows as u32);
        }
    }
    out
}

pub fn parse_mixture(bytes: &[u8]) -> Result<MixtureOfCodebooks> {
    let mut cur = Cur::new(bytes);
    cur.magic(BOOKS_MAGIC)?;
    cur.version()?;
    let n_scales = cur.usize32()?;
    let mut scales = Vec::with_capacity(n_scales.min(64));
    for _ in 0..n_scales {
        let scale_index = cur.u32()?;
        let n_entries = cur.usize32()?;
        let dim = cur.usize32()?;
        if dim == 0 {
            return Err(Error::Dim(format!("scale {scale_index} declares dim 0")));
        }
        let vectors = cur.f32s(checked_numel(&[n_entries, dim])?)?;
        scales.push(MixedCodebook {
            scale_index,
            dim,
            vectors,
            sources: Vec::new(),
        });
    }
    for s in &mut scales {
        let n_sources = cur.usize32()?;
        let mut total_rows = 0usize;
        for _ in 0..n_sources {
            let tag = cur.string()?;
            let rows = cur.usize32()?;
            total_rows = total_rows
                .checked_add(rows)
                .ok_or_else(|| Error::DimOverflow("codebook row count overflows usize".into()))?;
            s.sources.push((tag, rows));
        }
        if total_rows != s.n_entries() {
            return Err(Error::Dim(format!(
                "scale {} source table covers {total_rows} rows but the matrix has {}",
                s.scale_index,
                s.n_entries()
            )));
        }
    }
    cur.finish()?;
    Ok(MixtureOfCodebooks { scales })
}

pub fn write_mixture<P: AsRef<Path>>(path: P, mix: &MixtureOfCodebooks) -> Result<()> {
    Ok(std::fs::write(path, mixture_bytes(mix))?)
}

pub fn read_mixture<P: AsRef<Path>>(path: P) -> Result<MixtureOfCodebooks> {
    parse_mixture(&std::fs::read(path)?)
}

/// Hex SHA-256 of the serialized mixture — the cheap way to prove codebooks
/// did not move during stage 2 or adaptation.
pub fn mixture_sha256_hex(mix: &MixtureOfCodebooks) -> String {
    let digest = Sha256::digest(mixture_bytes(mix));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Named parameter blocks

/// A serialized parameter tensor: `{name, shape, f32 values}`. The kind of a
/// parameter is not stored — it is recovered from the model definition (and,
/// for adaptation-eligible tensors, from the stage-2 manifest).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

fn put_blocks(out: &mut Vec<u8>, blocks: &[ParamBlock]) {
    put_u32(out, blocks.len() as u32);
    for b in blocks {
        put_string(out, &b.name);
        put_u32(out, b.shape.len() as u32);
        for &e in &b.shape {
            put_u32(out, e as u32);
        }
        put_f32s(out, &b.values);
    }
}

fn take_blocks(cur: &mut Cur) -> Result<Vec<ParamBlock>> {
    let n = cur.usize32()?;
    let mut blocks = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name = cur.string()?;
        let rank = cur.usize32()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(cur.usize32()?);
        }
        let values = cur.f32s(checked_numel(&shape)?)?;
        blocks.push(ParamBlock { name, shape, values });
    }
    Ok(blocks)
}

/// Snapshot store entries (in store order) as f32 blocks, keeping only those
/// `filter` accepts.
pub fn blocks_from_store<T: Scalar, F>(store: &ParamStore<T>, mut filter: F) -> Vec<ParamBlock>
where
    F: FnMut(&ParamEntry<T>) -> bool,
{
    store
        .entries()
        .iter()
        .filter(|e| filter(e))
        .map(|e| ParamBlock {
            name: e.name.clone(),
            shape: e.shape.clone(),
            values: e.data.iter().map(|&v| v.into_f64() as f32).collect(),
        })
        .collect()
}

/// Overwrite existing store entries with block values. Every block must name
/// a known parameter of matching shape.
pub fn apply_blocks_to_store<T: Scalar>(
    store: &mut ParamStore<T>,
    blocks: &[ParamBlock],
) -> Result<()> {
    for b in blocks {
        let e = store.get_mut(&b.name)?;
        if e.shape != b.shape {
            return Err(Error::Dim(format!(
                "parameter '{}' has shape {:?} but the checkpoint stores {:?}",
                b.name, e.shape, b.shape
            )));
        }
        e.data = b.values.iter().map(|&v| T::from_f64(v as f64)).collect();
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// MCS1 / MCS2 checkpoints

/// Stage-1 checkpoint payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Checkpoint {
    /// Canonical (sorted-key) JSON of the training config.
    pub config_json: String,
    /// The learned per-scale codebooks.
    pub books: MixtureOfCodebooks,
    /// Encoder/decoder parameters.
    pub params: Vec<ParamBlock>,
}

pub fn stage1_bytes(ckpt: &Stage1Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&STAGE1_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_string(&mut out, &ckpt.config_json);
    put_blob(&mut out, &mixture_bytes(&ckpt.books));
    put_blocks(&mut out, &ckpt.params);
    out
}

pub fn parse_stage1(bytes: &[u8]) -> Result<Stage1Checkpoint> {
    let mut cur = Cur::new(bytes);
    cur.magic(STAGE1_MAGIC)?;
    cur.version()?;
    let config_json = cur.string()?;
    let books = parse_mixture(cur.blob()?)?;
    let params = take_blocks(&mut cur)?;
    cur.finish()?;
    Ok(Stage1Checkpoint {
        config_json,
        books,
        params,
    })
}

pub fn write_stage1<P: AsRef<Path>>(path: P, ckpt: &Stage1Checkpoint) -> Result<()> {
    Ok(std::fs::write(path, stage1_bytes(ckpt))?)
}

pub fn read_stage1<P: AsRef<Path>>(path: P) -> Result<Stage1Checkpoint> {
    parse_stage1(&std::fs::read(path)?)
}

/// Stage-2 checkpoint payload. The embedded stage-1 checkpoint carries the
/// mixed codebooks the network was trained against, so this file alone
/// suffices for inference and adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Checkpoint {
    pub stage1: Stage1Checkpoint,
    /// Reconstruction-network parameters plus the retrained stage-1 decoder.
    pub params: Vec<ParamBlock>,
    /// Names of the parameters eligible for test-time adaptation.
    pub ga_manifest: Vec<String>,
}

pub fn stage2_bytes(ckpt: &Stage2Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&STAGE2_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_blob(&mut out, &stage1_bytes(&ckpt.stage1));
    put_blocks(&mut out, &ckpt.params);
    put_u32(&mut out, ckpt.ga_manifest.len() as u32);
    for name in &ckpt.ga_manifest {
        put_string(&mut out, name);
    }
    out
}

pub fn parse_stage2(bytes: &[u8]) -> Result<Stage2Checkpoint> {
    let mut cur = Cur::new(bytes);
    cur.magic(STAGE2_MAGIC)?;
    cur.version()?;
    let stage1 = parse_stage1(cur.blob()?)?;
    let params = take_blocks(&mut cur)?;
    let n = cur.usize32()?;
    let mut ga_manifest = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        ga_manifest.push(cur.string()?);
    }
    cur.finish()?;
    Ok(Stage2Checkpoint {
        stage1,
        params,
        ga_manifest,
    })
}

pub fn write_stage2<P: AsRef<Path>>(path: P, ckpt: &Stage2Checkpoint) -> Result<()> {
    Ok(std::fs::write(path, stage2_bytes(ckpt))?)
}

pub fn read_stage2<P: AsRef<Path>>(path: P) -> Result<Stage2Checkpoint> {
    parse_stage2(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{init_codebook, MixtureOfCodebooks};
    use crate::data::synth_hsi;
    use crate::optim::ParamKind;

    fn sample_mixture() -> MixtureOfCodebooks {
        let a1 = init_codebook(8, 4, 1, 1, "alpha").unwrap();
        let b1 = init_codebook(6, 4, 2, 1, "beta").unwrap();
        let a2 = init_codebook(8, 2, 3, 2, "alpha").unwrap();
        let b2 = init_codebook(6, 2, 4, 2, "beta").unwrap();
        MixtureOfCodebooks::mix(&[&[a1, a2], &[b1, b2]]).unwrap()
    }

    #[test]
    fn cube_roundtrip_is_bit_exact() {
        let mut cube = synth_hsi(13, 5, 7, 6, 2).unwrap();
        // Plant awkward values: negative zero and a subnormal.
        cube.data[0] = -0.0;
        cube.data[1] = f32::from_bits(1);
        let bytes = cube_bytes(&cube);
        let back = parse_cube(&bytes).unwrap();
        assert_eq!((back.c, back.h, back.w), (5, 7, 6));
        let orig: Vec<u32> = cube.data.iter().map(|v| v.to_bits()).collect();
        let read: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(orig, read, "payload survives bit-for-bit");
    }

    #[test]
    fn cube_parse_errors_are_precise() {
        let cube = synth_hsi(1, 4, 4, 4, 2).unwrap();
        let good = cube_bytes(&cube);

        let mut wrong_magic = good.clone();
        wrong_magic[..4].copy_from_slice(b"NOPE");
        match parse_cube(&wrong_magic) {
            Err(Error::BadMagic { offset, expected, found }) => {
                assert_eq!(offset, 0);
                assert_eq!(expected, *b"MCGA");
                assert_eq!(found, *b"NOPE");
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }

        let mut wrong_version = good.clone();
        wrong_version[4..8].copy_from_slice(&9u32.to_le_bytes());
        match parse_cube(&wrong_version) {
            Err(Error::BadVersion { expected: 1, found: 9 }) => {}
            other => panic!("expected BadVersion, got {other:?}"),
        }

        let truncated = &good[..good.len() - 5];
        match parse_cube(truncated) {
            Err(Error::Truncated { offset, expected }) => {
                assert_eq!(offset, 20, "payload starts after the 20-byte header");
                assert_eq!(expected, 5, "five missing bytes reported");
            }
            other => panic!("expected Truncated, got {other:?}"),
        }

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(parse_cube(&trailing).is_err(), "trailing bytes rejected");

        let mut huge = good;
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        match parse_cube(&huge) {
            Err(Error::DimOverflow(_)) => {}
            // On 64-bit the product fits usize; the read then fails as truncated.
            Err(Error::Truncated { .. }) => {}
            other => panic!("expected overflow or truncation, got {other:?}"),
        }
    }

    #[test]
    fn mixture_roundtrip_preserves_sources_and_rows() {
        let mix = sample_mixture();
        let back = parse_mixture(&mixture_bytes(&mix)).unwrap();
        assert_eq!(back, mix, "mixture round-trips exactly");
        assert_eq!(back.scales[0].sources, vec![("alpha".into(), 8), ("beta".into(), 6)]);
        assert_eq!(back.scales[0].n_entries(), 14);
    }

    #[test]
    fn mixture_hash_tracks_content() {
        let mix = sample_mixture();
        let h1 = mixture_sha256_hex(&mix);
        let h2 = mixture_sha256_hex(&parse_mixture(&mixture_bytes(&mix)).unwrap());
        assert_eq!(h1, h2, "hash is stable across a round-trip");
        assert_eq!(h1.len(), 64);

        let mut bumped = mix.clone();
        bumped.scales[0].vectors[3] += 1e-7;
        assert_ne!(mixture_sha256_hex(&bumped), h1, "one changed float changes the hash");
    }

    #[test]
    fn canonical_json_sorts_keys() {
        #[derive(Serialize)]
        struct Cfg {
            zeta: u32,
            alpha: u32,
            mid: bool,
        }
        let s = canonical_json(&Cfg { zeta: 1, alpha: 2, mid: true }).unwrap();
        assert_eq!(s, r#"{"alpha":2,"mid":true,"zeta":1}"#);
    }

    #[test]
    fn stage1_checkpoint_roundtrip() {
        let ckpt = Stage1Checkpoint {
            config_json: r#"{"scales":2,"seed":42}"#.to_string(),
            books: sample_mixture(),
            params: vec![
                ParamBlock {
                    name: "enc.phi1".into(),
                    shape: vec![4, 3, 3, 3],
                    values: (0..108).map(|i| i as f32 * 0.5).collect(),
                },
                ParamBlock {
                    name: "dec.out.bias".into(),
                    shape: vec![16],
                    values: vec![-1.25; 16],
                },
            ],
        };
        let back = parse_stage1(&stage1_bytes(&ckpt)).unwrap();
        assert_eq!(back, ckpt);

        let mut bytes = stage1_bytes(&ckpt);
        bytes[0] = b'X';
        assert!(matches!(parse_stage1(&bytes), Err(Error::BadMagic { offset: 0, .. })));
    }

    #[test]
    fn stage2_checkpoint_roundtrip_is_self_contained() {
        let stage1 = Stage1Checkpoint {
            config_json: r#"{"scales":1}"#.to_string(),
            books: sample_mixture(),
            params: vec![ParamBlock {
                name: "dec.phi_r1".into(),
                shape: vec![2, 2],
                values: vec![1.0, 2.0, 3.0, 4.0],
            }],
        };
        let ckpt = Stage2Checkpoint {
            stage1,
            params: vec![ParamBlock {
                name: "ga.stage1.attn".into(),
                shape: vec![3, 3],
                values: vec![0.5; 9],
            }],
            ga_manifest: vec!["ga.stage1.attn".into()],
        };
        let back = parse_stage2(&stage2_bytes(&ckpt)).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.stage1.books.scales.len(), 2, "embedded books travel along");
        assert_eq!(back.ga_manifest, vec!["ga.stage1.attn".to_string()]);

        // Corruption inside the embedded blob surfaces as a parse error too.
        let mut bytes = stage2_bytes(&ckpt);
        // The embedded MCS1 starts after magic+version+len = offset 12.
        bytes[12] = b'Y';
        assert!(matches!(parse_stage2(&bytes), Err(Error::BadMagic { offset: 0, .. })));
    }

    #[test]
    fn store_blocks_roundtrip_and_validate() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.insert("conv.w", ParamKind::Conv, vec![2, 3], vec![1.5; 6]).unwrap();
        store.insert("ga.a", ParamKind::Ga, vec![4], vec![-0.25; 4]).unwrap();
        store.insert("book1", ParamKind::Codebook, vec![2, 2], vec![9.0; 4]).unwrap();

        let all = blocks_from_store(&store, |_| true);
        assert_eq!(all.len(), 3);
        let ga_only = blocks_from_store(&store, |e| e.kind == ParamKind::Ga);
        assert_eq!(ga_only.len(), 1);
        assert_eq!(ga_only[0].name, "ga.a");

        let mut target: ParamStore<f64> = ParamStore::new();
        target.insert("conv.w", ParamKind::Conv, vec![2, 3], vec![0.0; 6]).unwrap();
        target.insert("ga.a", ParamKind::Ga, vec![4], vec![0.0; 4]).unwrap();
        target.insert("book1", ParamKind::Codebook, vec![2, 2], vec![0.0; 4]).unwrap();
        apply_blocks_to_store(&mut target, &all).unwrap();
        assert_eq!(target.get("conv.w").unwrap().data, vec![1.5; 6]);
        assert_eq!(target.get("book1").unwrap().data, vec![9.0; 4]);

        let bad = vec![ParamBlock {
            name: "conv.w".into(),
            shape: vec![6],
            values: vec![0.0; 6],
        }];
        assert!(apply_blocks_to_store(&mut target, &bad).is_err(), "shape mismatch rejected");
        let unknown = vec![ParamBlock {
            name: "nope".into(),
            shape: vec![1],
            values: vec![0.0],
        }];
        assert!(apply_blocks_to_store(&mut target, &unknown).is_err(), "unknown name rejected");
    }
}
