//! Binary model files and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fewsound::{FewSoundConfig, FewSoundState};
use crate::inr::{Arch, InrConfig, InrModel};
use crate::tensor::Tensor;

/// Writes `bytes` to a temporary sibling of `path`, syncs it, then renames it into place,
/// so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// File signature.
pub const MAGIC: &[u8; 5] = b"AINR1";
pub const VERSION: u16 = 1;
/// Bytes after the payload: the CRC32 of everything before it.
pub const TRAILER_LEN: usize = 4;

const KIND_INR: u8 = 0;
const KIND_FEWSOUND: u8 = 1;

/// Contents of a model file.
#[derive(Clone, Debug, PartialEq)]
pub enum Saved {
    Inr(InrModel),
    FewSound(FewSoundState),
}

// Layout, all little-endian:
//   magic[5] version:u16 kind:u8 arch_tag:u8 config_len:u32 config[config_len]
//   param_count:u64 params:f64[param_count] crc32:u32
//
// INR config block: n_layers:u32 layers:u32[n] encoding_length:u32 rff_features:u32
//   rff_sigma:f64 omega0:f64 wire_scale:f64 finer_bias_bound:f64 grid_size:u32
//   spline_order:u32 scale_spline:u8 seed:u64
// FewSound config block: the target's INR block, then window:u32 embedding_dim:u32
//   stem_channels:u32 n_blocks:u32 block_channels:u32[n] weight_hidden:u32
//   n_hyper:u32 hyper_hidden:u32[n] lambda_t:f64 lambda_f:f64 epochs:u32
//   batch_size:u32 has_lr:u8 lr:f64 weight_decay:f64 sample_rate:u32 seed:u64
// FewSound parameters are γ, δ, η, θ, each tensor in row-major order.

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn list(&mut self, v: &[usize]) {
        self.u32(v.len());
        for &x in v {
            self.u32(x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn list(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        if n > self.bytes.len() {
            return Err(Error::Format(format!("list length {n} exceeds the file size")));
        }
        (0..n).map(|_| self.u32()).collect()
    }
}

fn write_inr_config(w: &mut Writer, c: &InrConfig) {
    w.list(&c.layers);
    w.u32(c.encoding_length);
    w.u32(c.rff_features);
    w.f64(c.rff_sigma);
    w.f64(c.omega0);
    w.f64(c.wire_scale);
    w.f64(c.finer_bias_bound);
    w.u32(c.grid_size);
    w.u32(c.spline_order);
    w.u8(u8::from(c.scale_spline));
    w.u64(c.seed);
}

fn read_inr_config(r: &mut Reader, arch: Arch) -> Result<InrConfig> {
    Ok(InrConfig {
        arch,
        layers: r.list()?,
        encoding_length: r.u32()?,
        rff_features: r.u32()?,
        rff_sigma: r.f64()?,
        omega0: r.f64()?,
        wire_scale: r.f64()?,
        finer_bias_bound: r.f64()?,
        grid_size: r.u32()?,
        spline_order: r.u32()?,
        scale_spline: r.u8()? != 0,
        seed: r.u64()?,
    })
}

fn write_fewsound_config(w: &mut Writer, c: &FewSoundConfig) {
    write_inr_config(w, &c.target);
    w.u32(c.window);
    w.u32(c.embedding_dim);
    w.u32(c.stem_channels);
    w.list(&c.block_channels);
    w.u32(c.weight_hidden);
    w.list(&c.hyper_hidden);
    w.f64(c.lambda_t);
    w.f64(c.lambda_f);
    w.u32(c.epochs);
    w.u32(c.batch_size);
    w.u8(u8::from(c.lr.is_some()));
    w.f64(c.lr.unwrap_or(0.0));
    w.f64(c.weight_decay);
    w.u32(c.sample_rate as usize);
    w.u64(c.seed);
}

fn read_fewsound_config(r: &mut Reader, arch: Arch) -> Result<FewSoundConfig> {
    let target = read_inr_config(r, arch)?;
    Ok(FewSoundConfig {
        target,
        window: r.u32()?,
        embedding_dim: r.u32()?,
        stem_channels: r.u32()?,
        block_channels: r.list()?,
        weight_hidden: r.u32()?,
        hyper_hidden: r.list()?,
        lambda_t: r.f64()?,
        lambda_f: r.f64()?,
        epochs: r.u32()?,
        batch_size: r.u32()?,
        lr: {
            let has = r.u8()? != 0;
            let v = r.f64()?;
            has.then_some(v)
        },
        weight_decay: r.f64()?,
        sample_rate: r.u32()? as u32,
        seed: r.u64()?,
    })
}

fn assemble(kind: u8, arch: Arch, config: &[u8], params: &[f64]) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(
        header_len(config.len()) + params.len() * 8 + TRAILER_LEN,
    ));
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.u8(kind);
    w.u8(arch.tag());
    w.u32(config.len());
    w.0.extend_from_slice(config);
    w.u64(params.len() as u64);
    for &p in params {
        w.f64(p);
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

/// Bytes before the parameter payload for a config block of `config_len` bytes.
pub fn header_len(config_len: usize) -> usize {
    MAGIC.len() + 2 + 1 + 1 + 4 + config_len + 8
}

/// Size of the INR config block of `config`.
pub fn inr_config_len(config: &InrConfig) -> usize {
    let mut w = Writer(Vec::new());
    write_inr_config(&mut w, config);
    w.0.len()
}

pub fn encode_model(model: &InrModel) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    write_inr_config(&mut w, model.config());
    assemble(KIND_INR, model.config().arch, &w.0, &model.flatten())
}

pub fn encode_state(state: &FewSoundState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    write_fewsound_config(&mut w, state.config());
    let mut params = Vec::new();
    for t in state
        .encoder_params()
        .iter()
        .chain(state.weight_encoder_params())
        .chain(state.hyper_params())
    {
        params.extend_from_slice(t.data());
    }
    params.extend_from_slice(state.theta());
    assemble(KIND_FEWSOUND, state.config().target.arch, &w.0, &params)
}

fn split_tensors(flat: &mut &[f64], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let (head, rest) = flat.split_at(n);
            *flat = rest;
            Tensor::new(s.clone(), head.to_vec())
        })
        .collect()
}

/// Parses and validates a model file.
pub fn decode(bytes: &[u8]) -> Result<Saved> {
    if bytes.len() < header_len(0) + TRAILER_LEN {
        return Err(Error::Format(format!(
            "file of {} bytes is too short",
            bytes.len()
        )));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic, not a model file".into()));
    }
    let (body, crc) = bytes.split_at(bytes.len() - TRAILER_LEN);
    let stored = u32::from_le_bytes(crc.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x} (corrupt or truncated file)"
        )));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let kind = r.u8()?;
    let arch = Arch::from_tag(r.u8()?)?;
    let config_len = r.u32()?;
    let config_bytes = r.take(config_len)?;
    let count = r.u64()? as usize;
    if body.len() - r.pos != count.saturating_mul(8) {
        return Err(Error::Format(format!(
            "header declares {count} parameters, payload holds {} bytes",
            body.len() - r.pos
        )));
    }
    let params: Vec<f64> = body[r.pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut cr = Reader {
        bytes: config_bytes,
        pos: 0,
    };
    let saved = match kind {
        KIND_INR => Saved::Inr(InrModel::unflatten(&read_inr_config(&mut cr, arch)?, &params)?),
        KIND_FEWSOUND => {
            let cfg = read_fewsound_config(&mut cr, arch)?;
            cfg.validate()?;
            let groups = [
                cfg.encoder_shapes(),
                cfg.weight_encoder_shapes(),
                cfg.hyper_shapes(),
            ];
            let expected: usize = groups
                .iter()
                .flatten()
                .map(|s| s.iter().product::<usize>())
                .sum::<usize>()
                + cfg.target_params();
            if expected != params.len() {
                return Err(Error::Format(format!(
                    "configuration needs {expected} parameters, file holds {}",
                    params.len()
                )));
            }
            let mut flat = params.as_slice();
            let encoder = split_tensors(&mut flat, &groups[0])?;
            let weight_encoder = split_tensors(&mut flat, &groups[1])?;
            let hyper = split_tensors(&mut flat, &groups[2])?;
            Saved::FewSound(FewSoundState::from_parts(
                cfg,
                encoder,
                weight_encoder,
                hyper,
                flat.to_vec(),
            )?)
        }
        other => return Err(Error::Format(format!("unknown payload kind {other}"))),
    };
    if cr.pos != config_bytes.len() {
        return Err(Error::Format("config block has trailing bytes".into()));
    }
    Ok(saved)
}

pub fn save_model(path: &Path, model: &InrModel) -> Result<()> {
    write_atomic(path, &encode_model(model))
}

pub fn save_state(path: &Path, state: &FewSoundState) -> Result<()> {
    write_atomic(path, &encode_state(state))
}

pub fn load(path: &Path) -> Result<Saved> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_model(path: &Path) -> Result<InrModel> {
    match load(path)? {
        Saved::Inr(m) => Ok(m),
        Saved::FewSound(_) => Err(Error::Format(format!(
            "{} holds a meta-learned state, not a single model",
            path.display()
        ))),
    }
}

pub fn load_state(path: &Path) -> Result<FewSoundState> {
    match load(path)? {
        Saved::FewSound(s) => Ok(s),
        Saved::Inr(_) => Err(Error::Format(format!(
            "{} holds a single model, not a meta-learned state",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn every_arch_roundtrips_bitwise() {
        for arch in Arch::ALL {
            let m = InrModel::build(&InrConfig::new(arch).with_layers(&[5, 3]).with_seed(9)).unwrap();
            let Saved::Inr(back) = decode(&encode_model(&m)).unwrap() else {
                panic!("wrong kind")
            };
            assert_eq!(back.config(), m.config());
            assert_eq!(bits(&back.flatten()), bits(&m.flatten()));
            assert_eq!(back, m);
        }
    }

    #[test]
    fn kan_base_file_size() {
        let m = InrModel::build(&InrConfig::new(Arch::Kan)).unwrap();
        let bytes = encode_model(&m);
        let cfg_len = inr_config_len(m.config());
        assert_eq!(bytes.len(), header_len(cfg_len) + 31_080 * 8 + TRAILER_LEN);
    }

    #[test]
    fn state_roundtrips_bitwise() {
        let cfg = FewSoundConfig {
            window: 64,
            block_channels: vec![2, 2],
            stem_channels: 2,
            embedding_dim: 3,
            weight_hidden: 4,
            hyper_hidden: vec![5, 6],
            lr: None,
            target: InrConfig::new(Arch::Siren).with_layers(&[4]),
            ..FewSoundConfig::toy()
        };
        let s = FewSoundState::init(&cfg).unwrap();
        let Saved::FewSound(back) = decode(&encode_state(&s)).unwrap() else {
            panic!("wrong kind")
        };
        assert_eq!(back, s);
    }

    #[test]
    fn corruption_is_reported_not_panicked() {
        let m = InrModel::build(&InrConfig::new(Arch::Nerf).with_layers(&[4])).unwrap();
        let bytes = encode_model(&m);
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Format(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(Error::Format(_))));
        let mut version = bytes;
        version[5] = 9;
        let n = version.len() - TRAILER_LEN;
        let crc = crc32fast::hash(&version[..n]).to_le_bytes();
        version[n..].copy_from_slice(&crc);
        assert!(matches!(decode(&version), Err(Error::Format(m)) if m.contains("version")));
    }

    #[test]
    fn files_roundtrip_and_kinds_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ainr");
        let m = InrModel::build(&InrConfig::new(Arch::Rff).with_layers(&[4])).unwrap();
        save_model(&p, &m).unwrap();
        assert_eq!(load_model(&p).unwrap(), m);
        assert!(load_state(&p).is_err());
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1, "temporary file left behind: {names:?}");
    }
}
