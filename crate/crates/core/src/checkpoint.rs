//! Upcycling a plain MoE layer into a Grove layer, and the checkpoint
//! container both layer kinds are stored in.
//!
//! Byte layout:
//!
//! ```text
//! "GROVEMOE1"            9 bytes magic
//! header_len             u32, little-endian
//! header                 header_len bytes of JSON (kind, config, tensor table)
//! payload                little-endian tensors, in tensor-table order
//! ```
//!
//! Each tensor-table entry carries `name`, `shape`, `dtype` (`f32`|`f64`)
//! and a byte `offset` relative to the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{check_lambda, GroveConfig, MoeConfig};
use crate::error::{GroveError, Result};
use crate::layer::{Ffn, GroveLayer, MoeLayer};
use crate::math::{normal_init, Matrix, Rng, Vector};
use crate::routing::Router;

pub const MAGIC: &[u8; 9] = b"GROVEMOE1";

/// Builds a Grove layer around `moe` whose initial function equals `moe`'s.
///
/// Router, experts and bias are copied verbatim. Each of the `g` adjugates
/// gets gate/up projections drawn from `normal(0, init_std)` and a zero
/// down-projection, so every adjugate outputs exactly zero until trained.
pub fn upcycle(
    moe: &MoeLayer,
    g: usize,
    h: usize,
    lambda: f64,
    init_std: f64,
    seed: u64,
) -> Result<GroveLayer> {
    let config = GroveConfig {
        d: moe.config.d,
        n: moe.config.n,
        k: moe.config.k,
        m: moe.config.m,
        g,
        h,
        lambda,
        init_std,
        seed,
        ..GroveConfig::default()
    };
    upcycle_with(moe, &config)
}

/// [`upcycle`] with every Grove hyperparameter taken from `config`, whose
/// `d`, `n`, `k`, `m` must match the source.
pub fn upcycle_with(moe: &MoeLayer, config: &GroveConfig) -> Result<GroveLayer> {
    let src = moe.config;
    for (field, want, got) in [
        ("d", src.d, config.d),
        ("n", src.n, config.n),
        ("k", src.k, config.k),
        ("m", src.m, config.m),
    ] {
        if want != got {
            return Err(GroveError::config(
                field,
                format!("source layer has {field}={want}, config has {got}"),
            ));
        }
    }
    if config.g == 0 || !src.n.is_multiple_of(config.g) {
        return Err(GroveError::config(
            "g",
            format!("g={} must divide n={} (g divides n)", config.g, src.n),
        ));
    }
    check_lambda(config.lambda, src.n, config.g)?;
    if !(config.init_std.is_finite() && config.init_std >= 0.0) {
        return Err(GroveError::config("init_std", "must be finite and >= 0"));
    }

    let mut rng = Rng::with_stream(config.seed, 2);
    let adjugates = (0..config.g)
        .map(|_| Ffn {
            gate: normal_init(&mut rng, config.h, src.d, config.init_std),
            up: normal_init(&mut rng, config.h, src.d, config.init_std),
            down: Matrix::zeros(src.d, config.h),
        })
        .collect();
    GroveLayer::new(
        config.clone(),
        moe.router.clone(),
        moe.experts.clone(),
        adjugates,
        moe.bias.clone(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(GroveError::UnknownDtype(other.to_string())),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// How the routing bias of an upcycled layer was initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasInit {
    /// Copied from the source checkpoint.
    Copied,
    /// Source had no bias tensor; started at zero.
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Plain(MoeLayer),
    Grove(GroveLayer),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Plain(_) => "plain",
            Layer::Grove(_) => "grove",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub layer: Layer,
    /// Set on Grove layers produced by upcycling.
    pub bias_init: Option<BiasInit>,
    /// Whether the file stored a bias tensor (absent → zeros).
    pub bias_present: bool,
}

impl Checkpoint {
    pub fn plain(layer: MoeLayer) -> Self {
        Checkpoint {
            layer: Layer::Plain(layer),
            bias_init: None,
            bias_present: true,
        }
    }

    pub fn grove(layer: GroveLayer) -> Self {
        Checkpoint {
            layer: Layer::Grove(layer),
            bias_init: None,
            bias_present: true,
        }
    }

    pub fn into_grove(self) -> Result<GroveLayer> {
        match self.layer {
            Layer::Grove(l) => Ok(l),
            Layer::Plain(_) => Err(GroveError::WrongLayerKind {
                expected: "grove",
                found: "plain".into(),
            }),
        }
    }

    pub fn into_plain(self) -> Result<MoeLayer> {
        match self.layer {
            Layer::Plain(l) => Ok(l),
            Layer::Grove(_) => Err(GroveError::WrongLayerKind {
                expected: "plain",
                found: "grove".into(),
            }),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerHeader {
    Plain {
        config: MoeConfig,
    },
    Grove {
        config: GroveConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias_init: Option<BiasInit>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    layer: LayerHeader,
    tensors: Vec<TensorEntry>,
}

fn ffn_tensors<'a>(prefix: &str, i: usize, f: &'a Ffn, out: &mut Vec<(String, &'a Matrix)>) {
    out.push((format!("{prefix}.{i}.gate"), &f.gate));
    out.push((format!("{prefix}.{i}.up"), &f.up));
    out.push((format!("{prefix}.{i}.down"), &f.down));
}

fn named_tensors(layer: &Layer) -> (Vec<(String, &Matrix)>, &Vector) {
    let mut out = Vec::new();
    let (router, experts, adjugates, bias) = match layer {
        Layer::Plain(l) => (&l.router, &l.experts, &[][..], &l.bias),
        Layer::Grove(l) => (&l.router, &l.experts, &l.adjugates[..], &l.bias),
    };
    out.push(("router".to_string(), &router.weight));
    for (i, e) in experts.iter().enumerate() {
        ffn_tensors("experts", i, e, &mut out);
    }
    for (j, a) in adjugates.iter().enumerate() {
        ffn_tensors("adjugates", j, a, &mut out);
    }
    (out, bias)
}

fn push_values(payload: &mut Vec<u8>, values: &[f64], dtype: Dtype) {
    for &v in values {
        match dtype {
            Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
}

pub fn encode(ckpt: &Checkpoint, dtype: Dtype) -> Vec<u8> {
    let (tensors, bias) = named_tensors(&ckpt.layer);
    let mut entries = Vec::with_capacity(tensors.len() + 1);
    let mut payload = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, values: &[f64], payload: &mut Vec<u8>| {
        entries.push(TensorEntry {
            name,
            shape,
            dtype: dtype.name().to_string(),
            offset: payload.len(),
        });
        push_values(payload, values, dtype);
    };
    for (name, m) in tensors {
        add(name, vec![m.rows(), m.cols()], m.data(), &mut payload);
    }
    add("bias".to_string(), vec![bias.len()], bias, &mut payload);

    let layer = match &ckpt.layer {
        Layer::Plain(l) => LayerHeader::Plain { config: l.config },
        Layer::Grove(l) => LayerHeader::Grove {
            config: l.config.clone(),
            bias_init: ckpt.bias_init,
        },
    };
    let header = serde_json::to_vec(&Header {
        layer,
        tensors: entries,
    })
    .expect("header serializes");

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

struct TensorReader<'a> {
    payload: &'a [u8],
    entries: Vec<TensorEntry>,
    next: usize,
}

impl TensorReader<'_> {
    fn read_values(&self, entry: &TensorEntry) -> Result<Vec<f64>> {
        let dtype = Dtype::parse(&entry.dtype)?;
        let count: usize = entry.shape.iter().product();
        let end = count
            .checked_mul(dtype.size())
            .and_then(|len| entry.offset.checked_add(len))
            .ok_or_else(|| {
                GroveError::MalformedHeader(format!("tensor `{}` size overflows", entry.name))
            })?;
        if end > self.payload.len() {
            return Err(GroveError::TruncatedPayload(format!(
                "tensor `{}` needs bytes up to {end}, payload has {}",
                entry.name,
                self.payload.len()
            )));
        }
        let bytes = &self.payload[entry.offset..end];
        Ok(match dtype {
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect(),
        })
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let entry = self
            .entries
            .get(self.next)
            .ok_or_else(|| GroveError::MalformedHeader(format!("missing tensor `{name}`")))?;
        if entry.name != name {
            return Err(GroveError::MalformedHeader(format!(
                "expected tensor `{name}`, found `{}`",
                entry.name
            )));
        }
        if entry.shape != [rows, cols] {
            return Err(GroveError::MalformedHeader(format!(
                "tensor `{name}` has shape {:?}, config implies [{rows}, {cols}]",
                entry.shape
            )));
        }
        let values = self.read_values(entry)?;
        self.next += 1;
        Matrix::from_vec(rows, cols, values)
    }

    fn ffn(&mut self, prefix: &str, i: usize, d: usize, width: usize) -> Result<Ffn> {
        Ok(Ffn {
            gate: self.matrix(&format!("{prefix}.{i}.gate"), width, d)?,
            up: self.matrix(&format!("{prefix}.{i}.up"), width, d)?,
            down: self.matrix(&format!("{prefix}.{i}.down"), d, width)?,
        })
    }

    /// Optional trailing `bias` tensor; zeros when absent.
    fn bias(&mut self, n: usize) -> Result<(Vector, bool)> {
        let Some(entry) = self.entries.get(self.next) else {
            return Ok((Vector::zeros(n), false));
        };
        if entry.name != "bias" || entry.shape != [n] {
            return Err(GroveError::MalformedHeader(format!(
                "expected tensor `bias` of shape [{n}], found `{}` {:?}",
                entry.name, entry.shape
            )));
        }
        let values = self.read_values(entry)?;
        self.next += 1;
        Ok((values.into(), true))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(GroveError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(GroveError::TruncatedPayload("missing header length".into()));
    }
    let header_len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < header_len {
        return Err(GroveError::TruncatedPayload(format!(
            "header declares {header_len} bytes, {} available",
            rest.len()
        )));
    }
    let header: Header = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| GroveError::MalformedHeader(e.to_string()))?;
    // Every dtype is checked before any data is read so an unknown dtype is
    // reported as such even when the payload is also short.
    for entry in &header.tensors {
        Dtype::parse(&entry.dtype)?;
    }
    let mut reader = TensorReader {
        payload: &rest[header_len..],
        entries: header.tensors,
        next: 0,
    };

    let (ckpt, n) = match header.layer {
        LayerHeader::Plain { config } => {
            config.validate()?;
            let router = Router::new(reader.matrix("router", config.n, config.d)?);
            let experts = (0..config.n)
                .map(|i| reader.ffn("experts", i, config.d, config.m))
                .collect::<Result<Vec<_>>>()?;
            let (bias, present) = reader.bias(config.n)?;
            let layer = MoeLayer::new(config, router, experts, bias)?;
            let mut ckpt = Checkpoint::plain(layer);
            ckpt.bias_present = present;
            (ckpt, config.n)
        }
        LayerHeader::Grove { config, bias_init } => {
            config.validate()?;
            let router = Router::new(reader.matrix("router", config.n, config.d)?);
            let experts = (0..config.n)
                .map(|i| reader.ffn("experts", i, config.d, config.m))
                .collect::<Result<Vec<_>>>()?;
            let adjugates = (0..config.g)
                .map(|j| reader.ffn("adjugates", j, config.d, config.h))
                .collect::<Result<Vec<_>>>()?;
            let (bias, present) = reader.bias(config.n)?;
            let n = config.n;
            let layer = GroveLayer::new(config, router, experts, adjugates, bias)?;
            let mut ckpt = Checkpoint::grove(layer);
            ckpt.bias_init = bias_init;
            ckpt.bias_present = present;
            (ckpt, n)
        }
    };
    if reader.next != reader.entries.len() {
        return Err(GroveError::MalformedHeader(format!(
            "{} unexpected trailing tensors after layer of {n} experts",
            reader.entries.len() - reader.next
        )));
    }
    Ok(ckpt)
}

pub fn save(ckpt: &Checkpoint, path: &Path, dtype: Dtype) -> Result<()> {
    std::fs::write(path, encode(ckpt, dtype)).map_err(|source| GroveError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| GroveError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{grove_forward_dedup, moe_forward};

    fn small_moe() -> MoeLayer {
        MoeLayer::random(
            MoeConfig {
                d: 5,
                n: 8,
                k: 3,
                m: 4,
            },
            21,
        )
        .unwrap()
    }

    #[test]
    fn upcycle_preserves_function_and_routing() {
        let moe = small_moe();
        let grove = upcycle(&moe, 4, 3, 0.5, 0.006, 1).unwrap();
        let mut rng = Rng::seed(2);
        for _ in 0..100 {
            let x = rng.normal_vector(5, 1.0);
            let (g, _) = grove_forward_dedup(&grove, &x).unwrap();
            let m = moe.forward(&x).unwrap();
            assert!(g.sub(&m).unwrap().max_abs() < 1e-12);
            assert_eq!(moe_forward(&grove, &x).unwrap(), m);
            let (a, b) = (moe.route(&x).unwrap(), grove.route(&x).unwrap());
            assert_eq!(a.selected, b.selected);
            assert_eq!(a.gate_weights, b.gate_weights);
        }
        for a in &grove.adjugates {
            assert!(a.down.is_zero());
        }
    }

    #[test]
    fn upcycle_zero_std_gives_zero_adjugates_and_is_deterministic() {
        let moe = small_moe();
        let grove = upcycle(&moe, 2, 3, 0.25, 0.0, 1).unwrap();
        assert!(grove
            .adjugates
            .iter()
            .all(|a| a.gate.is_zero() && a.up.is_zero() && a.down.is_zero()));
        assert_eq!(
            upcycle(&moe, 4, 3, 0.5, 0.006, 9).unwrap(),
            upcycle(&moe, 4, 3, 0.5, 0.006, 9).unwrap()
        );
    }

    #[test]
    fn upcycle_rejects_bad_groups_and_lambda() {
        let moe = small_moe();
        assert!(matches!(
            upcycle(&moe, 3, 3, 0.1, 0.006, 1),
            Err(GroveError::InvalidConfig { field: "g", .. })
        ));
        assert!(matches!(
            upcycle(&moe, 4, 3, 0.6, 0.006, 1),
            Err(GroveError::InvalidConfig {
                field: "lambda",
                ..
            })
        ));
    }

    #[test]
    fn upcycle_gate_std_matches_init() {
        let moe = MoeLayer::random(
            MoeConfig {
                d: 512,
                n: 2,
                k: 1,
                m: 2,
            },
            3,
        )
        .unwrap();
        let grove = upcycle(&moe, 1, 256, 0.5, 0.006, 4).unwrap();
        let data = grove.adjugates[0].gate.data();
        assert!(data.len() >= 100_000);
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let std = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std / 0.006 - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let grove = upcycle(&small_moe(), 4, 3, 0.5, 0.006, 1).unwrap();
        let ckpt = Checkpoint {
            bias_init: Some(BiasInit::Copied),
            ..Checkpoint::grove(grove)
        };
        let back = decode(&encode(&ckpt, Dtype::F64)).unwrap();
        assert_eq!(back, ckpt);

        let plain = Checkpoint::plain(small_moe());
        assert_eq!(decode(&encode(&plain, Dtype::F64)).unwrap(), plain);
    }

    #[test]
    fn f32_round_trip_rounds_to_single_precision() {
        let plain = Checkpoint::plain(small_moe());
        let back = decode(&encode(&plain, Dtype::F32))
            .unwrap()
            .into_plain()
            .unwrap();
        let orig = small_moe();
        for (a, b) in back
            .router
            .weight
            .data()
            .iter()
            .zip(orig.router.weight.data())
        {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn corrupt_inputs_map_to_distinct_errors() {
        let bytes = encode(&Checkpoint::plain(small_moe()), Dtype::F64);

        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(decode(&bad), Err(GroveError::BadMagic)));

        let short = &bytes[..bytes.len() - 8];
        assert!(matches!(
            decode(short),
            Err(GroveError::TruncatedPayload(_))
        ));

        let start = bytes.windows(5).position(|w| w == b"\"f64\"").unwrap();
        let mut bad = bytes.clone();
        bad[start + 1..start + 4].copy_from_slice(b"f16");
        assert!(matches!(decode(&bad), Err(GroveError::UnknownDtype(d)) if d == "f16"));

        assert!(matches!(
            decode(b"GROVEMOE1\x05\x00\x00\x00{}"),
            Err(GroveError::TruncatedPayload(_))
        ));
        assert!(matches!(
            decode(b"GROVEMOE1\x02\x00\x00\x00{}"),
            Err(GroveError::MalformedHeader(_))
        ));
    }

    #[test]
    fn missing_bias_tensor_loads_as_zero() {
        let moe = MoeLayer {
            bias: vec![0.5; 8].into(),
            ..small_moe()
        };
        let bytes = encode(&Checkpoint::plain(moe), Dtype::F64);
        // Rebuild without the trailing bias entry.
        let header_len = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let mut header: serde_json::Value =
            serde_json::from_slice(&bytes[13..13 + header_len]).unwrap();
        header["tensors"].as_array_mut().unwrap().pop();
        let header = serde_json::to_vec(&header).unwrap();
        let payload = &bytes[13 + header_len..bytes.len() - 8 * 8];
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(payload);
        let ckpt = decode(&out).unwrap();
        assert!(!ckpt.bias_present);
        assert_eq!(ckpt.into_plain().unwrap().bias, Vector::zeros(8));
    }
}
