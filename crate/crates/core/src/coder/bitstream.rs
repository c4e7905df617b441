use super::range::{RangeDecoder, RangeEncoder};
use super::tables::{build_factorized_cdfs, GaussianTables};
use crate::codec::{self, FactorizedPrior};
use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tensor};

pub const MAGIC: &[u8; 5] = b"MCBS1";
pub const VERSION: u8 = 1;
/// Size of the fixed container header in bytes.
pub const HEADER_LEN: usize = 23;

/// A compressed image: header fields plus the two range-coded payloads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub version: u8,
    pub width: u16,
    pub height: u16,
    pub quality: u8,
    pub latent_channels: u16,
    pub hyper_channels: u16,
    pub hyper_payload: Vec<u8>,
    pub latent_payload: Vec<u8>,
}

/// Decoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Reconstruction clamped to `[0, 1]`, shape `1 x 3 x H x W`.
    pub x_hat: Tensor,
    pub y_hat: Tensor,
    pub h_hat: Tensor,
}

impl Bitstream {
    pub fn len_bytes(&self) -> usize {
        HEADER_LEN + self.hyper_payload.len() + self.latent_payload.len()
    }

    pub fn payload_bits(&self) -> usize {
        8 * (self.hyper_payload.len() + self.latent_payload.len())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let len32 = |n: usize| {
            u32::try_from(n).map_err(|_| Error::Coding(format!("payload of {n} bytes too large")))
        };
        let mut out = Vec::with_capacity(self.len_bytes());
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.quality);
        out.extend_from_slice(&self.latent_channels.to_le_bytes());
        out.extend_from_slice(&self.hyper_channels.to_le_bytes());
        out.extend_from_slice(&len32(self.hyper_payload.len())?.to_le_bytes());
        out.extend_from_slice(&len32(self.latent_payload.len())?.to_le_bytes());
        out.extend_from_slice(&self.hyper_payload);
        out.extend_from_slice(&self.latent_payload);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_LEN {
            return Err(Error::format(buf.len(), format!("header needs {HEADER_LEN} bytes, stream has {}", buf.len())));
        }
        if &buf[..5] != MAGIC {
            return Err(Error::format(0, "missing MCBS1 magic"));
        }
        if buf[5] != VERSION {
            return Err(Error::format(5, format!("unsupported version {}", buf[5])));
        }
        let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (width, height) = (u16_at(6), u16_at(8));
        if width == 0 || height == 0 || width % 16 != 0 || height % 16 != 0 {
            return Err(Error::format(6, format!("image size {width}x{height} is not a positive multiple of 16")));
        }
        let quality = buf[10];
        let (latent_channels, hyper_channels) = (u16_at(11), u16_at(13));
        if latent_channels == 0 || hyper_channels == 0 {
            return Err(Error::format(11, "zero channel count"));
        }
        let (hyper_len, latent_len) = (u32_at(15), u32_at(19));
        let expected = HEADER_LEN + hyper_len + latent_len;
        if buf.len() != expected {
            return Err(Error::format(
                15,
                format!("header declares {expected} bytes in total, stream has {}", buf.len()),
            ));
        }
        Ok(Self {
            version: VERSION,
            width,
            height,
            quality,
            latent_channels,
            hyper_channels,
            hyper_payload: buf[HEADER_LEN..HEADER_LEN + hyper_len].to_vec(),
            latent_payload: buf[HEADER_LEN + hyper_len..].to_vec(),
        })
    }
}

fn to_symbols(t: &Tensor) -> Result<Vec<i32>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || v.abs() > f64::from(i16::MAX) {
                Err(Error::Coding(format!("latent value {v} is not a 16-bit integer")))
            } else {
                Ok(v as i32)
            }
        })
        .collect()
}

/// Compresses one image (`1 x 3 x H x W`, H and W multiples of 16).
pub fn serialize(x: &Tensor, params: &ParameterSet, quality: u8) -> Result<Bitstream> {
    let (n, _, h, w) = x.dims4()?;
    if n != 1 {
        return Err(Error::shape(format!("serialize takes one image, got a batch of {n}")));
    }
    codec::check_image_shape(x.shape())?;
    let (width, height) = (
        u16::try_from(w).map_err(|_| Error::shape(format!("width {w} exceeds 65535")))?,
        u16::try_from(h).map_err(|_| Error::shape(format!("height {h} exceeds 65535")))?,
    );
    let lat = codec::encode_latents(params, x)?;
    let (_, lc, _, _) = lat.y_hat.dims4()?;
    let (_, hc, hh, hw) = lat.h_hat.dims4()?;

    let hyper_tables = build_factorized_cdfs(&FactorizedPrior::from_params(params)?)?;
    let mut enc = RangeEncoder::new();
    for (i, s) in to_symbols(&lat.h_hat)?.into_iter().enumerate() {
        hyper_tables[i / (hh * hw)].encode(&mut enc, s)?;
    }
    let hyper_payload = enc.finish();

    let gauss = GaussianTables::new()?;
    let mut enc = RangeEncoder::new();
    for (s, &sigma) in to_symbols(&lat.y_hat)?.into_iter().zip(lat.sigma.data()) {
        gauss.for_sigma(sigma).encode(&mut enc, s)?;
    }
    let latent_payload = enc.finish();

    Ok(Bitstream {
        version: VERSION,
        width,
        height,
        quality,
        latent_channels: lc as u16,
        hyper_channels: hc as u16,
        hyper_payload,
        latent_payload,
    })
}

/// Reconstructs an image using only the hyper-decoder, entropy-model and
/// decoder parameters.
pub fn deserialize(bs: &Bitstream, params: &ParameterSet) -> Result<Decoded> {
    if bs.version != VERSION {
        return Err(Error::format(5, format!("unsupported version {}", bs.version)));
    }
    let prior = FactorizedPrior::from_params(params)?;
    if prior.channels() != usize::from(bs.hyper_channels) {
        return Err(Error::format(
            13,
            format!("stream has {} hyper channels, model has {}", bs.hyper_channels, prior.channels()),
        ));
    }
    let model_latent = params.value("dec.deconv0.w")?.shape()[0];
    if model_latent != usize::from(bs.latent_channels) {
        return Err(Error::format(
            11,
            format!("stream has {} latent channels, model has {model_latent}", bs.latent_channels),
        ));
    }
    let (h, w) = (usize::from(bs.height), usize::from(bs.width));
    let latent_hw = (h / 8, w / 8);
    let (hh, hw) = codec::hyper_size(latent_hw);
    let (lc, hc) = (usize::from(bs.latent_channels), usize::from(bs.hyper_channels));

    let hyper_tables = build_factorized_cdfs(&prior)?;
    let mut dec = RangeDecoder::new(&bs.hyper_payload)?;
    let mut hyper = Vec::with_capacity(hc * hh * hw);
    for i in 0..hc * hh * hw {
        hyper.push(f64::from(hyper_tables[i / (hh * hw)].decode(&mut dec)?));
    }
    dec.finish()?;
    let h_hat = Tensor::new(&[1, hc, hh, hw], hyper)?;

    let sigma = codec::scales_from_hyper(params, &h_hat, latent_hw)?;
    let gauss = GaussianTables::new()?;
    let mut dec = RangeDecoder::new(&bs.latent_payload)?;
    let latent = sigma
        .data()
        .iter()
        .map(|&s| gauss.for_sigma(s).decode(&mut dec).map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    let y_hat = Tensor::new(&[1, lc, latent_hw.0, latent_hw.1], latent)?;
    let x_hat = codec::decode_synthesis(params, &y_hat)?;
    Ok(Decoded { x_hat, y_hat, h_hat })
}
