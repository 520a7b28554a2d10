//! Binary formats: checkpoints, palettes, attention maps, PPM and PGM.
//!
//! Everything is little-endian f32. Loaders report the byte offset of the
//! first problem and never truncate silently.
//!
//! Checkpoint layout:
//!
//! ```text
//! "MGTC" u32 version
//! u32 len, config text (key=value lines)
//! u32 len, palette blob in the MGTP format (len 0 = no palette)
//! u32 count, then per tensor in name order:
//!     u32 len, name, u32 rank, rank x u32 dims, f32 data
//! u32 CRC32 of every preceding byte
//! ```

use std::collections::BTreeMap;

use crate::consolidation::AttnMap;
use crate::error::{invalid, Error, Result};
use crate::model::{ModelConfig, Params, Tensor};
use crate::tokenizer::{Image, Palette};
use crate::Model;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MGTC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const PALETTE_MAGIC: [u8; 4] = *b"MGTP";
pub const MAP_MAGIC: [u8; 4] = *b"MGTA";

/// Bounds-checked little-endian reader.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(Error::Truncated { offset: self.pos, needed: n - left });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| self.malformed("element count overflows"))?;
        Ok(self.take(bytes)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != expected {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(&expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::Malformed { offset: self.pos, reason: reason.into() }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.malformed(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| invalid(format!("length {n} does not fit in u32")))?;
    put_u32(out, v);
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialized model: config text, optional palette and named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub palette: Option<Palette>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, palette: Option<&Palette>) -> Self {
        Self {
            config: model.config.to_kv(),
            palette: palette.cloned(),
            tensors: model.params.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn to_model(&self) -> Result<Model<f32>> {
        let config = ModelConfig::from_kv(&self.config)?;
        let mut params = Params::<f32>::zeros(&config);
        params.load_named(|name| self.tensors.get(name).cloned())?;
        if let Some(extra) = self.tensors.keys().find(|k| !params.named().iter().any(|(n, _)| n == *k)) {
            return Err(Error::Shape(format!("unexpected tensor {extra}")));
        }
        Model::from_params(config, params)
    }

    /// Canonical bytes. Fails on any non-finite weight.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_len(&mut out, self.config.len())?;
        out.extend_from_slice(self.config.as_bytes());
        let palette = self.palette.as_ref().map(palette_to_bytes).transpose()?.unwrap_or_default();
        put_len(&mut out, palette.len())?;
        out.extend_from_slice(&palette);
        put_len(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteWeight(name.clone()));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Shape(format!("tensor {name}: shape {:?} vs {} values", t.shape, t.data.len())));
            }
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.shape.len())?;
            for &d in &t.shape {
                put_len(&mut out, d)?;
            }
            put_f32s(&mut out, &t.data);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        if bytes.len() < 12 {
            return Err(Error::Truncated { offset: bytes.len(), needed: 12 - bytes.len() });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let n = r.count()?;
        let config = std::str::from_utf8(r.take(n)?)
            .map_err(|_| r.malformed("config block is not UTF-8"))?
            .to_string();
        let n = r.count()?;
        let palette = if n == 0 { None } else { Some(palette_from_bytes(r.take(n)?)?) };
        let count = r.count()?;
        let mut tensors = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let n = r.count()?;
            let name =
                std::str::from_utf8(r.take(n)?).map_err(|_| r.malformed("tensor name is not UTF-8"))?.to_string();
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(r.malformed(format!("tensor {name} out of order")));
            }
            let rank = r.count()?;
            let shape = (0..rank).map(|_| r.count()).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.malformed(format!("tensor {name} size overflows")))?;
            let data = r.f32s(len)?;
            last = Some(name.clone());
            tensors.insert(name, Tensor { shape, data });
        }
        r.finish()?;
        Ok(Self { config, palette, tensors })
    }
}

/// Writes a checkpoint of `model` to `sink`; returns the byte count.
pub fn save_checkpoint(model: &Model<f32>, palette: Option<&Palette>, mut sink: impl std::io::Write) -> Result<usize> {
    let bytes = Checkpoint::from_model(model, palette).to_bytes()?;
    sink.write_all(&bytes)?;
    Ok(bytes.len())
}

/// Reads a checkpoint from `source`.
pub fn load_checkpoint(mut source: impl std::io::Read) -> Result<(Model<f32>, Option<Palette>)> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    Ok((ckpt.to_model()?, ckpt.palette))
}

pub fn palette_to_bytes(p: &Palette) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * p.raw().len());
    out.extend_from_slice(&PALETTE_MAGIC);
    put_len(&mut out, p.vocab_size())?;
    put_len(&mut out, p.patch_size())?;
    put_len(&mut out, p.channels())?;
    put_f32s(&mut out, p.raw());
    Ok(out)
}

pub fn palette_from_bytes(bytes: &[u8]) -> Result<Palette> {
    let mut r = Reader::new(bytes);
    r.magic(PALETTE_MAGIC)?;
    let v = r.count()?;
    let p = r.count()?;
    let c = r.count()?;
    let n = v
        .checked_mul(p)
        .and_then(|x| x.checked_mul(p))
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| r.malformed("palette size overflows"))?;
    let values = r.f32s(n)?;
    r.finish()?;
    Palette::new(p, c, values)
}

pub fn map_to_bytes(m: &AttnMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * m.values.len());
    out.extend_from_slice(&MAP_MAGIC);
    put_len(&mut out, m.height)?;
    put_len(&mut out, m.width)?;
    put_f32s(&mut out, &m.values);
    Ok(out)
}

pub fn map_from_bytes(bytes: &[u8]) -> Result<AttnMap> {
    let mut r = Reader::new(bytes);
    r.magic(MAP_MAGIC)?;
    let h = r.count()?;
    let w = r.count()?;
    let n = h.checked_mul(w).ok_or_else(|| r.malformed("map size overflows"))?;
    let values = r.f32s(n)?;
    r.finish()?;
    AttnMap::new(h, w, values)
}

/// 8-bit single-channel image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn pnm_header(kind: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{kind}\n{width} {height}\n255\n").into_bytes()
}

/// Parses a binary PNM header; returns `(width, height, payload offset)`.
fn parse_pnm_header(bytes: &[u8], kind: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 {
        return Err(Error::Truncated { offset: bytes.len(), needed: 2 - bytes.len() });
    }
    if &bytes[..2] != kind {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(kind).into_owned(),
            found: String::from_utf8_lossy(&bytes[..2]).into_owned(),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return match bytes.get(pos) {
                None => Err(Error::Truncated { offset: pos, needed: 1 }),
                Some(_) => Err(Error::Malformed { offset: pos, reason: "expected a decimal number".into() }),
            };
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Malformed { offset: start, reason: "number out of range".into() })?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Malformed { offset: pos, reason: format!("maxval {maxval}, only 255 is supported") });
    }
    if width == 0 || height == 0 {
        return Err(Error::Malformed { offset: pos, reason: "zero image dimension".into() });
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((width, height, pos + 1)),
        None => Err(Error::Truncated { offset: pos, needed: 1 }),
        Some(_) => Err(Error::Malformed { offset: pos, reason: "expected whitespace after maxval".into() }),
    }
}

fn pnm_payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    let have = bytes.len() - offset;
    if have < len {
        return Err(Error::Truncated { offset: bytes.len(), needed: len - have });
    }
    if have > len {
        return Err(Error::Malformed { offset: offset + len, reason: format!("{} trailing bytes", have - len) });
    }
    Ok(&bytes[offset..])
}

/// Encodes an RGB image with values in `[0, 1]` as binary PPM.
pub fn ppm_to_bytes(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, image has {}", img.channels)));
    }
    let mut out = pnm_header("P6", img.width, img.height);
    out.extend(img.data.iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Decodes a binary PPM into an RGB image with values `byte / 255`.
pub fn ppm_from_bytes(bytes: &[u8]) -> Result<Image> {
    let (w, h, off) = parse_pnm_header(bytes, b"P6")?;
    let payload = pnm_payload(bytes, off, w * h * 3)?;
    Image::new(h, w, 3, payload.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn pgm_to_bytes(img: &GrayImage) -> Vec<u8> {
    let mut out = pnm_header("P5", img.width, img.height);
    out.extend_from_slice(&img.data);
    out
}

pub fn pgm_from_bytes(bytes: &[u8]) -> Result<GrayImage> {
    let (w, h, off) = parse_pnm_header(bytes, b"P5")?;
    let payload = pnm_payload(bytes, off, w * h)?;
    Ok(GrayImage { height: h, width: w, data: payload.to_vec() })
}

/// Min-max scales a map to `0..=255`; a flat map becomes all 255.
pub fn map_to_gray(m: &AttnMap) -> GrayImage {
    let (lo, hi) = m.range();
    let data = if hi > lo {
        let span = (hi - lo) as f64;
        m.values.iter().map(|&v| ((v - lo) as f64 / span * 255.0).round() as u8).collect()
    } else {
        vec![255; m.values.len()]
    };
    GrayImage { height: m.height, width: m.width, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_model() -> Model<f32> {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 6,
            text_vocab: 5,
            grid_h: 2,
            grid_w: 3,
            max_text_len: 3,
            time_buckets: 4,
            ffn_dim: 16,
            ..ModelConfig::default()
        };
        Model::new(cfg, 5).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_canonical() {
        let model = micro_model();
        let palette = Palette::flat_colors(2, 2).unwrap();
        let mut bytes = Vec::new();
        let n = save_checkpoint(&model, Some(&palette), &mut bytes).unwrap();
        assert_eq!(n, bytes.len());
        let (back, pal) = load_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(pal.as_ref(), Some(&palette));
        let mut again = Vec::new();
        save_checkpoint(&back, pal.as_ref(), &mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let ckpt = Checkpoint { config: String::new(), palette: None, tensors: BTreeMap::new() };
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let bytes = Checkpoint::from_model(&micro_model(), None).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::UnsupportedVersion(9))));
        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::ChecksumMismatch { .. })));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
    }

    #[test]
    fn nan_weight_is_rejected() {
        let mut model = micro_model();
        model.params.head_b.data[1] = f32::NAN;
        let err = save_checkpoint(&model, None, Vec::new()).unwrap_err();
        assert!(err.to_string().contains("NaN in checkpoint"));
    }

    #[test]
    fn white_pixel_ppm() {
        let img = Image::filled(1, 1, 3, 1.0);
        let bytes = ppm_to_bytes(&img).unwrap();
        assert_eq!(bytes, b"P6\n1 1\n255\n\xff\xff\xff");
        assert_eq!(ppm_from_bytes(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_header_with_comments() {
        let img = ppm_from_bytes(b"P6 # made by hand\n2 1 255\n\x00\x00\x00\xff\x80\x00").unwrap();
        assert_eq!((img.height, img.width), (1, 2));
        assert_eq!(img.at(0, 1, 1), 128.0 / 255.0);
    }

    #[test]
    fn pnm_errors_name_offsets() {
        assert!(matches!(ppm_from_bytes(b"P6\n2 2\n255\n\x00\x00"), Err(Error::Truncated { offset: 13, needed: 10 })));
        assert!(matches!(ppm_from_bytes(b"P6\n2 x\n255\n"), Err(Error::Malformed { offset: 5, .. })));
        assert!(matches!(ppm_from_bytes(b"P6\n1 1\n65535\n\x00\x00\x00"), Err(Error::Malformed { .. })));
        assert!(matches!(pgm_from_bytes(b"P6\n1 1\n255\n\x00"), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn flat_map_is_white() {
        let g = map_to_gray(&AttnMap::filled(3, 2, 0.25));
        assert_eq!(g.data, vec![255; 6]);
        let back = pgm_from_bytes(&pgm_to_bytes(&g)).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn map_and_palette_round_trip() {
        let m = AttnMap::new(2, 2, vec![0.1, 0.0, 3.5e-8, 1.0]).unwrap();
        let bytes = map_to_bytes(&m).unwrap();
        assert_eq!(&bytes[..4], b"MGTA");
        assert_eq!(map_from_bytes(&bytes).unwrap(), m);
        assert!(matches!(map_from_bytes(&bytes[..15]), Err(Error::Truncated { offset: 12, .. })));
        let p = Palette::flat_colors(4, 2).unwrap();
        assert_eq!(palette_from_bytes(&palette_to_bytes(&p).unwrap()).unwrap(), p);
    }
}
