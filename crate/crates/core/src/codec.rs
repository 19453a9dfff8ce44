//! Binary and text records for butterfly products and checkpoints.
//!
//! Binary product record, all integers and floats little-endian:
//!
//! ```text
//! b"BFLY"  u32 version  u64 n  u64 lg_n  u8 relaxed
//! f64 (a, b, c, d) per block, layers ascending, blocks in pairing order
//! ```
//!
//! A checkpoint is a product record followed by `n` f64 diagonal entries and
//! the f64 eigenvalue floor. The text forms carry the same fields:
//!
//! ```text
//! butterfly <n> <lg_n> <relaxed>
//! <a> <b> <c> <d>            (n lg_n / 2 lines)
//! d <d_1> ... <d_n>          (checkpoint only)
//! eps <floor>                (checkpoint only)
//! ```

use std::path::Path;

use crate::butterfly::{log2_exact, ButterflyProduct};
use crate::error::{Error, Result};
use crate::factorization::SymmetricFactorization;

pub const MAGIC: &[u8; 4] = b"BFLY";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    Binary,
    Text,
}

pub fn encode_product(q: &ButterflyProduct) -> Vec<u8> {
    let params = q.params();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(q.dim() as u64).to_le_bytes());
    out.extend_from_slice(&(q.log_dim() as u64).to_le_bytes());
    out.push(u8::from(!q.is_projected()));
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_product(bytes: &[u8]) -> Result<ButterflyProduct> {
    let mut r = Reader { bytes, pos: 0 };
    let q = r.product()?;
    r.finish()?;
    Ok(q)
}

pub fn encode_checkpoint(f: &SymmetricFactorization) -> Vec<u8> {
    let mut out = encode_product(&f.q);
    for v in f.d.iter().chain(std::iter::once(&f.eig_floor)) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SymmetricFactorization> {
    let mut r = Reader { bytes, pos: 0 };
    let q = r.product()?;
    let d = (0..q.dim()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let eig_floor = r.f64()?;
    r.finish()?;
    let mut f = SymmetricFactorization::new(q, d)?;
    f.eig_floor = eig_floor;
    Ok(f)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, k: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < k {
            return Err(Error::Format(format!(
                "truncated record: need {k} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn product(&mut self) -> Result<ButterflyProduct> {
        if self.take(4)? != MAGIC {
            return Err(Error::Format("bad magic at offset 0".into()));
        }
        let version = u32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version} at offset 4")));
        }
        let n = self.u64()?;
        let lg = self.u64()?;
        let (n, lg) = check_header(n, lg, 8)?;
        let relaxed = match self.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("relaxed flag {b} at offset 24"))),
        };
        let mut q = ButterflyProduct::identity(n)?;
        let count = q.num_relaxed_params();
        debug_assert_eq!(count, 2 * n * lg);
        let params = (0..count).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        q.set_params(&params)?;
        check_flag(&q, relaxed)?;
        Ok(q)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes at offset {}",
                self.bytes.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

fn check_header(n: u64, lg: u64, offset: usize) -> Result<(usize, usize)> {
    let n = usize::try_from(n).map_err(|_| Error::Format(format!("dimension {n} at offset {offset}")))?;
    match log2_exact(n) {
        Some(l) if l >= 1 && l as u64 == lg => Ok((n, l)),
        _ => Err(Error::Format(format!(
            "header n = {n}, lg n = {lg} at offset {offset} is not a power of two with matching log"
        ))),
    }
}

fn check_flag(q: &ButterflyProduct, relaxed: bool) -> Result<()> {
    if !relaxed && !q.is_projected() {
        return Err(Error::Format("record flagged as projected holds non-rotation blocks".into()));
    }
    Ok(())
}

pub fn product_to_text(q: &ButterflyProduct) -> String {
    let mut s = format!("butterfly {} {} {}\n", q.dim(), q.log_dim(), u8::from(!q.is_projected()));
    for p in q.params().chunks_exact(4) {
        s.push_str(&format!("{} {} {} {}\n", p[0], p[1], p[2], p[3]));
    }
    s
}

pub fn checkpoint_to_text(f: &SymmetricFactorization) -> String {
    let mut s = product_to_text(&f.q);
    s.push('d');
    for v in &f.d {
        s.push_str(&format!(" {v}"));
    }
    s.push_str(&format!("\neps {}\n", f.eig_floor));
    s
}

pub fn product_from_text(text: &str) -> Result<ButterflyProduct> {
    let mut lines = TextLines::new(text);
    let q = lines.product()?;
    lines.finish()?;
    Ok(q)
}

pub fn checkpoint_from_text(text: &str) -> Result<SymmetricFactorization> {
    let mut lines = TextLines::new(text);
    let q = lines.product()?;
    let d = lines.tagged("d", q.dim())?;
    let eps = lines.tagged("eps", 1)?;
    lines.finish()?;
    let mut f = SymmetricFactorization::new(q, d)?;
    f.eig_floor = eps[0];
    Ok(f)
}

struct TextLines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> TextLines<'a> {
    fn new(text: &'a str) -> Self {
        Self { inner: text.lines().enumerate() }
    }

    fn next(&mut self) -> Result<(usize, &'a str)> {
        for (i, line) in self.inner.by_ref() {
            if !line.trim().is_empty() {
                return Ok((i + 1, line));
            }
        }
        Err(Error::Format("unexpected end of text record".into()))
    }

    fn floats(line_no: usize, fields: &[&str], expected: usize) -> Result<Vec<f64>> {
        if fields.len() != expected {
            return Err(Error::Format(format!(
                "line {line_no}: expected {expected} values, found {}",
                fields.len()
            )));
        }
        fields
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {line_no}: bad number {t:?}")))
            })
            .collect()
    }

    fn product(&mut self) -> Result<ButterflyProduct> {
        let (no, header) = self.next()?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 4 || f[0] != "butterfly" {
            return Err(Error::Format(format!("line {no}: expected `butterfly <n> <lg_n> <relaxed>`")));
        }
        let int = |t: &str| t.parse::<u64>().map_err(|_| Error::Format(format!("line {no}: bad integer {t:?}")));
        let (n, _) = check_header(int(f[1])?, int(f[2])?, 0)
            .map_err(|_| Error::Format(format!("line {no}: bad dimension header")))?;
        let relaxed = match f[3] {
            "0" => false,
            "1" => true,
            t => return Err(Error::Format(format!("line {no}: bad relaxed flag {t:?}"))),
        };
        let mut q = ButterflyProduct::identity(n)?;
        let mut params = Vec::with_capacity(q.num_relaxed_params());
        for _ in 0..q.num_relaxed_params() / 4 {
            let (no, line) = self.next()?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            params.extend(Self::floats(no, &fields, 4)?);
        }
        q.set_params(&params)?;
        check_flag(&q, relaxed)?;
        Ok(q)
    }

    fn tagged(&mut self, tag: &str, expected: usize) -> Result<Vec<f64>> {
        let (no, line) = self.next()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&tag) {
            return Err(Error::Format(format!("line {no}: expected `{tag}` line")));
        }
        Self::floats(no, &fields[1..], expected)
    }

    fn finish(&mut self) -> Result<()> {
        match self.next() {
            Ok((no, _)) => Err(Error::Format(format!("line {no}: trailing content"))),
            Err(_) => Ok(()),
        }
    }
}

/// Writes a checkpoint in the given format.
pub fn save_checkpoint(path: &Path, f: &SymmetricFactorization, format: RecordFormat) -> Result<()> {
    let bytes = match format {
        RecordFormat::Binary => encode_checkpoint(f),
        RecordFormat::Text => checkpoint_to_text(f).into_bytes(),
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint, detecting the format from the leading magic.
pub fn load_checkpoint(path: &Path) -> Result<SymmetricFactorization> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        decode_checkpoint(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format(format!("not utf-8 text: {e}")))?;
        checkpoint_from_text(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize, seed: u64) -> SymmetricFactorization {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = ButterflyProduct::random(n, &mut rng).unwrap();
        let d = (0..n).map(|i| (i as f64 - 1.5) / 3.0).collect();
        SymmetricFactorization::new(q, d).unwrap()
    }

    #[test]
    fn binary_layout() {
        let q = ButterflyProduct::identity(2).unwrap();
        let b = encode_product(&q);
        assert_eq!(b.len(), HEADER_LEN + 4 * 8);
        assert_eq!(&b[..4], b"BFLY");
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1u64.to_le_bytes());
        assert_eq!(b[24], 0);
        assert_eq!(&b[25..33], &1.0f64.to_le_bytes());
        assert_eq!(&b[33..41], &0.0f64.to_le_bytes());
    }

    #[test]
    fn round_trips() {
        let f = sample(16, 3);
        assert_eq!(decode_checkpoint(&encode_checkpoint(&f)).unwrap(), f);
        assert_eq!(checkpoint_from_text(&checkpoint_to_text(&f)).unwrap(), f);
        assert_eq!(decode_product(&encode_product(&f.q)).unwrap(), f.q);
        assert_eq!(product_from_text(&product_to_text(&f.q)).unwrap(), f.q);
    }

    #[test]
    fn relaxed_records_keep_their_coefficients() {
        let mut f = sample(8, 4);
        f.q.layers_mut()[1].set_block(2, 1.5, -0.25, 3.0, 1e-300);
        let back = decode_checkpoint(&encode_checkpoint(&f)).unwrap();
        assert_eq!(back, f);
        assert_eq!(encode_checkpoint(&f)[24], 1);
    }

    #[test]
    fn rejects_malformed_records() {
        let f = sample(4, 1);
        let bin = encode_checkpoint(&f);
        assert!(decode_checkpoint(&bin[..bin.len() - 1]).is_err());
        let mut extra = bin.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut bad = bin.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad_n = bin.clone();
        bad_n[8] = 3;
        assert!(decode_checkpoint(&bad_n).is_err());
        // projected flag over a non-rotation block
        let mut q = f.q.clone();
        q.layers_mut()[0].set_block(0, 2.0, 0.0, 0.0, 2.0);
        let mut rec = encode_product(&q);
        rec[24] = 0;
        assert!(decode_product(&rec).is_err());
        assert!(checkpoint_from_text("butterfly 4 2 0\n1 0 0 1\n").is_err());
        assert!(product_from_text("butterfly 3 1 0\n").is_err());
    }

    #[test]
    fn file_round_trip_detects_format() {
        let dir = std::env::temp_dir().join(format!("bh-codec-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let f = sample(8, 9);
        for (name, fmt) in [("c.bin", RecordFormat::Binary), ("c.txt", RecordFormat::Text)] {
            let p = dir.join(name);
            save_checkpoint(&p, &f, fmt).unwrap();
            assert_eq!(load_checkpoint(&p).unwrap(), f);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
