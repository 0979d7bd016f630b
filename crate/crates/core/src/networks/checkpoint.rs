//! `BLDN` checkpoint files.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "BLDN" | version | meta_len | meta (UTF-8 "key=value\n" lines)
//! | n_arrays | { name_len | name | ndim | dims[ndim] | f32 LE data }*
//! ```
//!
//! Arrays are named `dnet/<param>` and `nnet/<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{DNet, DNetConfig, NNet, NNetConfig, NetworkBundle, Provenance};
use crate::data::NormalizationRecord;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 4] = b"BLDN";
pub const VERSION: u32 = 1;

fn metadata(bundle: &NetworkBundle<f32>) -> Vec<(String, String)> {
    let d = &bundle.dnet.config;
    let n = &bundle.nnet.config;
    let p = &bundle.provenance;
    let mut m = vec![
        ("dnet.base_filters", d.base_filters.to_string()),
        ("dnet.levels", d.levels.to_string()),
        ("dnet.stem_convs", d.stem_convs.to_string()),
        ("dnet.convs_per_block", d.convs_per_block.to_string()),
        ("dnet.bottleneck_convs", d.bottleneck_convs.to_string()),
        ("dnet.tail_1x1_layers", d.tail_1x1_layers.to_string()),
        ("dnet.tail_filters", d.tail_filters.to_string()),
        ("dnet.receptive_field", bundle.receptive_field().to_string()),
        ("nnet.components", n.components.to_string()),
        ("nnet.hidden_filters", n.hidden_filters.to_string()),
        ("nnet.blocks", n.blocks.to_string()),
        ("train.seed", p.seed.to_string()),
        ("train.epochs", p.epochs.to_string()),
        ("train.allow_transpose", p.allow_transpose.to_string()),
    ];
    if let Some(norm) = bundle.normalization {
        m.push(("norm.center", norm.center.to_string()));
        m.push(("norm.scale", norm.scale.to_string()));
    }
    m.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_params(buf: &mut Vec<u8>, prefix: &str, params: &ParamSet<f32>) {
    for p in params.iter() {
        let name = format!("{prefix}/{}", p.name);
        put_u32(buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(buf, 4);
        for d in p.value.shape() {
            put_u32(buf, d as u32);
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode(bundle: &NetworkBundle<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let meta: String = metadata(bundle).iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_u32(&mut buf, meta.len() as u32);
    buf.extend_from_slice(meta.as_bytes());
    put_u32(&mut buf, (bundle.dnet.params.len() + bundle.nnet.params.len()) as u32);
    put_params(&mut buf, "dnet", &bundle.dnet.params);
    put_params(&mut buf, "nnet", &bundle.nnet.params);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Decode(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn field<V: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<V> {
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::Decode(format!("checkpoint metadata lacks `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Decode(format!("bad value `{raw}` for `{key}`")))
}

pub fn decode(bytes: &[u8]) -> Result<NetworkBundle<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Decode("not a BLDN checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Decode(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta_txt = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| Error::Decode("metadata is not UTF-8".into()))?;
    let mut meta = BTreeMap::new();
    for line in meta_txt.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Decode(format!("bad metadata line `{line}`")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let count = r.u32()? as usize;
    let mut dparams = ParamSet::new();
    let mut nparams = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Decode("array name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        if ndim != 4 {
            return Err(Error::Decode(format!("array `{name}` has {ndim} dims, expected 4")));
        }
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Decode("array too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor4::from_vec(shape, data).map_err(|e| Error::Decode(e.to_string()))?;
        match name.split_once('/') {
            Some(("dnet", p)) => dparams.insert(p, t)?,
            Some(("nnet", p)) => nparams.insert(p, t)?,
            _ => return Err(Error::Decode(format!("unexpected array `{name}`"))),
        };
    }
    if r.pos != bytes.len() {
        return Err(Error::Decode("trailing bytes after checkpoint payload".into()));
    }
    let dcfg = DNetConfig {
        base_filters: field(&meta, "dnet.base_filters")?,
        levels: field(&meta, "dnet.levels")?,
        stem_convs: field(&meta, "dnet.stem_convs")?,
        convs_per_block: field(&meta, "dnet.convs_per_block")?,
        bottleneck_convs: field(&meta, "dnet.bottleneck_convs")?,
        tail_1x1_layers: field(&meta, "dnet.tail_1x1_layers")?,
        tail_filters: field(&meta, "dnet.tail_filters")?,
    };
    let ncfg = NNetConfig {
        components: field(&meta, "nnet.components")?,
        hidden_filters: field(&meta, "nnet.hidden_filters")?,
        blocks: field(&meta, "nnet.blocks")?,
    };
    let normalization = match (meta.get("norm.center"), meta.get("norm.scale")) {
        (Some(_), Some(_)) => Some(NormalizationRecord::new(
            field(&meta, "norm.center")?,
            field(&meta, "norm.scale")?,
        )?),
        _ => None,
    };
    let bundle = NetworkBundle {
        dnet: DNet::from_params(dcfg, dparams)?,
        nnet: NNet::from_params(ncfg, nparams)?,
        normalization,
        provenance: Provenance {
            seed: field(&meta, "train.seed")?,
            epochs: field(&meta, "train.epochs")?,
            allow_transpose: field(&meta, "train.allow_transpose")?,
        },
    };
    let rf: usize = field(&meta, "dnet.receptive_field")?;
    if rf != bundle.receptive_field() {
        return Err(Error::Decode(format!(
            "recorded receptive field {rf} disagrees with architecture ({})",
            bundle.receptive_field()
        )));
    }
    Ok(bundle)
}

pub fn save(path: &Path, bundle: &NetworkBundle<f32>) -> Result<()> {
    fs::write(path, encode(bundle)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NetworkBundle<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Decode(msg) => Error::format(path, msg),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bundle(components: usize, norm: bool) -> NetworkBundle<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(components as u64);
        let mut b =
            NetworkBundle::build(DNetConfig::with_filters(4), NNetConfig::with_components(components), 77, &mut rng)
                .unwrap();
        for p in b.dnet.params.iter_mut().chain(b.nnet.params.iter_mut()) {
            for v in p.value.data_mut() {
                *v += rng.random_range(-1.0f32..1.0) * 1e-3;
            }
        }
        if norm {
            b.normalization = Some(NormalizationRecord::new(123.25, 17.5).unwrap());
        }
        b.provenance.epochs = 9;
        b.provenance.allow_transpose = false;
        b
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for n in 1..=3 {
            for norm in [true, false] {
                let b = bundle(n, norm);
                let bytes = encode(&b);
                let back = decode(&bytes).unwrap();
                assert_eq!(encode(&back), bytes);
                let bits = |v: Vec<f32>| v.into_iter().map(f32::to_bits).collect::<Vec<_>>();
                assert_eq!(bits(back.dnet.params.flat_values()), bits(b.dnet.params.flat_values()));
                assert_eq!(bits(back.nnet.params.flat_values()), bits(b.nnet.params.flat_values()));
                assert_eq!(back.normalization, b.normalization);
                assert_eq!(back.provenance, b.provenance);
                assert_eq!(back.dnet.config, b.dnet.config);
                assert_eq!(back.nnet.config, b.nnet.config);
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bldn");
        let b = bundle(2, true);
        save(&path, &b).unwrap();
        assert_eq!(encode(&load(&path).unwrap()), encode(&b));
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = encode(&bundle(1, true));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(&bytes[..10]).is_err());
        assert!(decode(&[]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
