//! Binary checkpoint: `LFNN`, u32 version, u32 descriptor length, descriptor
//! text (`key=value` lines), then u64 count + f32 parameters and u64 count +
//! f32 buffers. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{NnError, Result};
use crate::network::{Network, NetworkKind, NetworkSpec};

pub const MAGIC: [u8; 4] = *b"LFNN";
pub const VERSION: u32 = 1;

/// Serializes a network; `tag` is free text kept in the descriptor.
pub fn encode(net: &Network<f32>, tag: &str) -> Result<Vec<u8>> {
    if tag.contains(['\n', '\r']) {
        return Err(NnError::Descriptor("tag must be a single line".into()));
    }
    let s = &net.spec;
    let desc = format!(
        "kind={}\nin={}\nout={}\nfilters={}\nbase={}\nlevels={}\ndropout={:?}\nmomentum={:?}\ntag={}\n",
        s.kind.name(),
        s.in_channels,
        s.out_classes,
        s.dpn_filters,
        s.unet_base_filters,
        s.levels,
        s.dropout_rate,
        s.bn_momentum,
        tag
    );
    let (p, b) = (&net.store.params, &net.store.buffers);
    let mut out = Vec::with_capacity(32 + desc.len() + 4 * (p.len() + b.len()));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    for block in [p, b] {
        out.extend_from_slice(&(block.len() as u64).to_le_bytes());
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(NnError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn floats(&mut self, what: &'static str) -> Result<Vec<f32>> {
        let n = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        let n = usize::try_from(n).map_err(|_| NnError::Truncated(what))?;
        let raw = self.take(n.checked_mul(4).ok_or(NnError::Truncated(what))?, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

fn parse_descriptor(text: &str) -> Result<(NetworkSpec, String)> {
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| NnError::Descriptor(format!("malformed line {line:?}")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| NnError::Descriptor(format!("missing key {k}")));
    fn num<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
        v.parse().map_err(|_| NnError::Descriptor(format!("bad value for {k}: {v:?}")))
    }
    let kind = match get("kind")? {
        "dpn" => NetworkKind::Dpn,
        "unet" => NetworkKind::Unet,
        other => return Err(NnError::Descriptor(format!("unknown kind {other:?}"))),
    };
    let spec = NetworkSpec {
        kind,
        in_channels: num("in", get("in")?)?,
        out_classes: num("out", get("out")?)?,
        dpn_filters: num("filters", get("filters")?)?,
        unet_base_filters: num("base", get("base")?)?,
        levels: num("levels", get("levels")?)?,
        dropout_rate: num("dropout", get("dropout")?)?,
        bn_momentum: num("momentum", get("momentum")?)?,
    };
    spec.validate().map_err(|e| NnError::Descriptor(e.to_string()))?;
    Ok((spec, get("tag").unwrap_or("").to_string()))
}

/// Returns the network and its tag.
pub fn decode(bytes: &[u8]) -> Result<(Network<f32>, String)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(NnError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(NnError::UnsupportedVersion(version));
    }
    let len = r.u32("descriptor length")? as usize;
    let text = std::str::from_utf8(r.take(len, "descriptor")?).map_err(|_| NnError::Descriptor("not UTF-8".into()))?;
    let (spec, tag) = parse_descriptor(text)?;
    let params = r.floats("parameters")?;
    let buffers = r.floats("buffers")?;
    if r.pos != bytes.len() {
        return Err(NnError::Descriptor(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((Network::from_parts(spec, params, buffers)?, tag))
}

pub fn save(path: &Path, net: &Network<f32>, tag: &str) -> Result<()> {
    fs::write(path, encode(net, tag)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Network<f32>, String)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Network<f32> {
        Network::build(NetworkSpec { dpn_filters: 3, levels: 2, ..NetworkSpec::dpn(2, 3) }, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = small();
        let bytes = encode(&net, "stage1 dpn").unwrap();
        let (back, tag) = decode(&bytes).unwrap();
        assert_eq!(tag, "stage1 dpn");
        assert_eq!(back.spec, net.spec);
        assert_eq!(back.store.params, net.store.params);
        assert_eq!(back.store.buffers, net.store.buffers);
        assert_eq!(encode(&back, "stage1 dpn").unwrap(), bytes);
    }

    #[test]
    fn corrupted_headers_give_distinct_errors() {
        let bytes = encode(&small(), "").unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(NnError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(decode(&bad), Err(NnError::UnsupportedVersion(7))));
        assert!(matches!(decode(&bytes[..6]), Err(NnError::Truncated("version"))));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(NnError::Truncated("buffers"))));
        let mut bad = bytes.clone();
        bad[12] = b'#';
        assert!(matches!(decode(&bad), Err(NnError::Descriptor(_))));
    }
}
