//! Parameter files: a one-line JSON manifest, a newline, then every
//! parameter as little-endian `f64` in manifest tensor order.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{
    Autoencoder, ConvDecoder, ConvEncoder, DeepRewardModel, EncoderConfig, HeadConfig,
    LinearConfig, LinearPerActionModel, MlpHead, RewardModel, TensorInfo,
};
use crate::error::{Error, Result};
use crate::model::Activation;

pub const PARAMS_FORMAT: &str = "tamer-params";
const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub architecture: Value,
    pub tensors: Vec<TensorInfo>,
    pub param_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_actions: Option<usize>,
    /// `sha256:<hex>` of the raw parameter block.
    pub checksum: String,
}

/// Something that can be written to and rebuilt from a parameter file.
pub trait Persist: Sized {
    fn kind(&self) -> &'static str;
    fn architecture(&self) -> Value;
    fn tensors(&self) -> Vec<TensorInfo>;
    fn flat_params(&self) -> Vec<f64>;
    fn num_actions(&self) -> Option<usize> {
        None
    }
    fn rebuild(kind: &str, architecture: &Value, params: &[f64]) -> Result<Self>;
}

fn checksum(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(7 + 64);
    s.push_str("sha256:");
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn save_params<P: Persist, W: Write>(item: &P, seed: Option<u64>, mut sink: W) -> Result<()> {
    let params = item.flat_params();
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameters"));
    }
    let mut block = Vec::with_capacity(params.len() * 8);
    for v in &params {
        block.extend_from_slice(&v.to_le_bytes());
    }
    let manifest = Manifest {
        format: PARAMS_FORMAT.into(),
        version: PARAMS_VERSION,
        kind: item.kind().into(),
        architecture: item.architecture(),
        tensors: item.tensors(),
        param_count: params.len(),
        seed,
        num_actions: item.num_actions(),
        checksum: checksum(&block),
    };
    serde_json::to_writer(&mut sink, &manifest)?;
    sink.write_all(b"\n")?;
    sink.write_all(&block)?;
    sink.flush()?;
    Ok(())
}

/// Reads and validates only the manifest line.
pub fn read_manifest<R: BufRead>(source: &mut R) -> Result<Manifest> {
    let mut line = Vec::new();
    source.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::ParamFile("missing manifest line".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&line)
        .map_err(|e| Error::ParamFile(format!("bad manifest: {e}")))?;
    if manifest.format != PARAMS_FORMAT {
        return Err(Error::ParamFile(format!(
            "unknown format {:?}",
            manifest.format
        )));
    }
    if manifest.version != PARAMS_VERSION {
        return Err(Error::ParamFile(format!(
            "unsupported version {}",
            manifest.version
        )));
    }
    let declared: usize = manifest.tensors.iter().map(TensorInfo::len).sum();
    if declared != manifest.param_count {
        return Err(Error::ParamFile(format!(
            "tensor shapes cover {declared} values but param_count is {}",
            manifest.param_count
        )));
    }
    Ok(manifest)
}

pub fn load_params<P: Persist, R: Read>(source: R) -> Result<(P, Manifest)> {
    let mut reader = BufReader::new(source);
    let manifest = read_manifest(&mut reader)?;
    let mut block = Vec::with_capacity(manifest.param_count * 8);
    reader.read_to_end(&mut block)?;
    if block.len() != manifest.param_count * 8 {
        return Err(Error::ParamFile(format!(
            "expected {} parameter bytes, found {}",
            manifest.param_count * 8,
            block.len()
        )));
    }
    if checksum(&block) != manifest.checksum {
        return Err(Error::ParamFile("checksum mismatch".into()));
    }
    let params: Vec<f64> = block
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stored parameters"));
    }
    let item = P::rebuild(&manifest.kind, &manifest.architecture, &params)?;
    if !manifest.tensors.starts_with(&item.tensors()) {
        return Err(Error::ParamFile(
            "tensor list does not match the architecture".into(),
        ));
    }
    Ok((item, manifest))
}

fn field<T: serde::de::DeserializeOwned>(arch: &Value, name: &str) -> Result<T> {
    let v = arch
        .get(name)
        .ok_or_else(|| Error::ParamFile(format!("architecture lacks {name:?}")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::ParamFile(format!("architecture {name:?}: {e}")))
}

fn expect_kind(kind: &str, wanted: &[&str]) -> Result<()> {
    if wanted.contains(&kind) {
        Ok(())
    } else {
        Err(Error::ParamFile(format!(
            "file holds a {kind:?}, expected one of {wanted:?}"
        )))
    }
}

fn expect_len(params: &[f64], n: usize) -> Result<()> {
    if params.len() != n {
        return Err(Error::ParamFile(format!(
            "architecture needs {n} parameters, file has {}",
            params.len()
        )));
    }
    Ok(())
}

impl Persist for ConvEncoder {
    fn kind(&self) -> &'static str {
        "encoder"
    }

    fn architecture(&self) -> Value {
        json!({ "encoder": self.config() })
    }

    fn tensors(&self) -> Vec<TensorInfo> {
        self.network().tensor_infos("encoder")
    }

    fn flat_params(&self) -> Vec<f64> {
        self.params()
    }

    /// Also accepts an autoencoder file and keeps only its encoder half.
    fn rebuild(kind: &str, arch: &Value, params: &[f64]) -> Result<Self> {
        expect_kind(kind, &["encoder", "autoencoder"])?;
        let cfg: EncoderConfig = field(arch, "encoder")?;
        let mut enc = ConvEncoder::new(cfg, 0)?;
        let n = enc.param_count();
        if kind == "encoder" {
            expect_len(params, n)?;
        } else if params.len() < n {
            return Err(Error::ParamFile(
                "autoencoder file too short for its encoder".into(),
            ));
        }
        enc.network_mut().set_params(&params[..n]);
        Ok(enc)
    }
}

impl Persist for Autoencoder {
    fn kind(&self) -> &'static str {
        "autoencoder"
    }

    fn architecture(&self) -> Value {
        json!({
            "encoder": self.encoder.config(),
            "decoder_output": self.decoder.output_activation(),
        })
    }

    fn tensors(&self) -> Vec<TensorInfo> {
        let mut t = self.encoder.network().tensor_infos("encoder");
        t.extend(self.decoder.network().tensor_infos("decoder"));
        t
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.network().params());
        p
    }

    fn rebuild(kind: &str, arch: &Value, params: &[f64]) -> Result<Self> {
        expect_kind(kind, &["autoencoder"])?;
        let cfg: EncoderConfig = field(arch, "encoder")?;
        let out: Activation = field(arch, "decoder_output")?;
        let mut ae = Autoencoder {
            decoder: ConvDecoder::mirror(&cfg, out, 0)?,
            encoder: ConvEncoder::new(cfg, 0)?,
        };
        let n = ae.encoder.param_count();
        expect_len(params, n + ae.decoder.network().param_count())?;
        ae.encoder.network_mut().set_params(&params[..n]);
        ae.decoder.network_mut().set_params(&params[n..]);
        Ok(ae)
    }
}

impl Persist for RewardModel {
    fn kind(&self) -> &'static str {
        RewardModel::kind(self)
    }

    fn architecture(&self) -> Value {
        match self {
            RewardModel::Linear(m) => json!({
                "input_shape": [m.input_shape.0, m.input_shape.1, m.input_shape.2],
                "bias": m.bias,
                "num_actions": m.num_actions,
            }),
            RewardModel::Deep(m) => json!({
                "encoder": m.encoder.config(),
                "head": m.head.config(),
                "num_actions": m.head.num_actions(),
            }),
        }
    }

    fn tensors(&self) -> Vec<TensorInfo> {
        match self {
            RewardModel::Linear(m) => vec![TensorInfo {
                name: "linear.weight".into(),
                shape: vec![m.num_actions, m.feature_dim()],
            }],
            RewardModel::Deep(m) => {
                let mut t = m.encoder.network().tensor_infos("encoder");
                t.extend(m.head.network().tensor_infos("head"));
                t
            }
        }
    }

    fn flat_params(&self) -> Vec<f64> {
        match self {
            RewardModel::Linear(m) => m.weights.clone(),
            RewardModel::Deep(m) => {
                let mut p = m.encoder.params();
                p.extend(m.head.network().params());
                p
            }
        }
    }

    fn num_actions(&self) -> Option<usize> {
        Some(RewardModel::num_actions(self))
    }

    fn rebuild(kind: &str, arch: &Value, params: &[f64]) -> Result<Self> {
        expect_kind(kind, &["linear", "deep"])?;
        let num_actions: usize = field(arch, "num_actions")?;
        if kind == "linear" {
            let shape: [usize; 3] = field(arch, "input_shape")?;
            let bias: bool = field(arch, "bias")?;
            let mut m = LinearPerActionModel::zeros(
                (shape[0], shape[1], shape[2]),
                num_actions,
                LinearConfig { bias },
            );
            expect_len(params, m.weights.len())?;
            m.weights.copy_from_slice(params);
            return Ok(RewardModel::Linear(m));
        }
        let cfg: EncoderConfig = field(arch, "encoder")?;
        let head_cfg: HeadConfig = field(arch, "head")?;
        let mut enc = ConvEncoder::new(cfg, 0)?;
        let mut head = MlpHead::new(enc.latent_dim(), num_actions, head_cfg, 0)?;
        let n = enc.param_count();
        expect_len(params, n + head.network().param_count())?;
        enc.network_mut().set_params(&params[..n]);
        head.network_mut().set_params(&params[n..]);
        Ok(RewardModel::Deep(DeepRewardModel::from_parts(enc, head)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deep() -> RewardModel {
        let enc = ConvEncoder::new(EncoderConfig::default(), 3).unwrap();
        let mut m = DeepRewardModel::new(enc, 4, HeadConfig::default(), 4).unwrap();
        let mut p = m.head.network().params();
        for (i, v) in p.iter_mut().enumerate() {
            *v += i as f64 * 1e-3;
        }
        m.head.network_mut().set_params(&p);
        RewardModel::Deep(m)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for m in [
            deep(),
            RewardModel::Linear(LinearPerActionModel::zeros(
                (2, 3, 3),
                4,
                LinearConfig::default(),
            )),
        ] {
            let mut buf = Vec::new();
            save_params(&m, Some(9), &mut buf).unwrap();
            let (back, manifest): (RewardModel, _) = load_params(buf.as_slice()).unwrap();
            assert_eq!(back, m);
            assert_eq!(manifest.seed, Some(9));
            assert_eq!(manifest.num_actions, Some(4));
            assert_eq!(manifest.param_count, m.flat_params().len());
        }
    }

    #[test]
    fn manifest_is_first_line() {
        let mut buf = Vec::new();
        save_params(&deep(), None, &mut buf).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        let v: Value = serde_json::from_slice(&buf[..nl]).unwrap();
        assert_eq!(v["format"], "tamer-params");
        assert_eq!(v["kind"], "deep");
        assert!(v["checksum"].as_str().unwrap().starts_with("sha256:"));
    }

    #[test]
    fn truncated_file_rejected() {
        let mut buf = Vec::new();
        save_params(&deep(), None, &mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        let err = load_params::<RewardModel, _>(buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::ParamFile(_)), "{err}");
    }

    #[test]
    fn corrupted_block_rejected() {
        let mut buf = Vec::new();
        save_params(&deep(), None, &mut buf).unwrap();
        let last = buf.len() - 1;
        buf[last] ^= 0x01;
        let err = load_params::<RewardModel, _>(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn wrong_kind_rejected() {
        let mut buf = Vec::new();
        save_params(&deep(), None, &mut buf).unwrap();
        assert!(load_params::<ConvEncoder, _>(buf.as_slice()).is_err());
    }

    #[test]
    fn encoder_loads_from_autoencoder_file() {
        let ae = Autoencoder::new(EncoderConfig::default(), 5).unwrap();
        let mut buf = Vec::new();
        save_params(&ae, Some(5), &mut buf).unwrap();
        let (enc, _): (ConvEncoder, _) =
            load_params(buf.as_slice()).unwrap_or_else(|e| panic!("{e}"));
        assert_eq!(&enc, &ae.encoder);
    }
}
