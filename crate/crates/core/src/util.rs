//! Small shared helpers: stable hashing, JSONL IO and checksums.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a sequence of byte slices, with a separator byte between parts
/// so that `["ab", "c"]` and `["a", "bc"]` hash differently.
pub fn stable_hash<'a, I>(parts: I) -> u64
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut h = FNV_OFFSET;
    for part in parts {
        for &b in part {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        h ^= 0xff;
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Maps a hash to a uniform value in `[0, 1)`.
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic uniform draw keyed by a seed and string parts.
pub fn keyed_uniform(seed: u64, parts: &[&str]) -> f64 {
    let seed_bytes = seed.to_le_bytes();
    let iter = std::iter::once(&seed_bytes[..]).chain(parts.iter().map(|p| p.as_bytes()));
    unit_interval(stable_hash(iter))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_hex(&bytes))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), lineno + 1),
            )
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn to_jsonl_string<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item).expect("serializable record"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separator_distinguishes_splits() {
        let a = stable_hash([&b"ab"[..], &b"c"[..]]);
        let b = stable_hash([&b"a"[..], &b"bc"[..]]);
        assert_ne!(a, b);
    }

    #[test]
    fn keyed_uniform_is_stable_and_in_range() {
        let u = keyed_uniform(7, &["scene-000001", "3"]);
        assert_eq!(u, keyed_uniform(7, &["scene-000001", "3"]));
        assert!((0.0..1.0).contains(&u));
        assert_ne!(u, keyed_uniform(8, &["scene-000001", "3"]));
    }

    #[test]
    fn keyed_uniform_is_roughly_uniform() {
        let n = 20_000;
        let below = (0..n).filter(|i| keyed_uniform(1, &[&i.to_string()]) < 0.3).count();
        let frac = below as f64 / n as f64;
        assert!((frac - 0.3).abs() < 0.02, "frac={frac}");
    }
}
