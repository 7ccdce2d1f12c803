//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PDSRCKPT"            magic
//! u32                    format version
//! u32 + bytes            JSON header (integers and strings only)
//! u64                    entry count
//! per entry, sorted by name:
//!   u32 + bytes          name
//!   u32                  ndim
//!   u64 * ndim           dims
//!   f64 * prod(dims)     values
//! ```
//!
//! Entry names: `param/<net>/<name>`, `adam/<net>/{m,v}/<name>`,
//! `adam/<net>/hyper` (`[beta1, beta2, eps]`), `dual/<sample>` and
//! `extra/<name>`. Saving the same checkpoint twice gives identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterSet;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::trainer::DualState;

pub const MAGIC: &[u8; 8] = b"PDSRCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form run label, e.g. the training mode.
    pub tag: String,
    pub model: Model,
    /// Optimizer state keyed by network (`go`, `gp`, `disc`).
    pub optim: BTreeMap<String, AdamState>,
    pub dual: Option<DualState>,
    pub rng: RngState,
    /// Completed training units (epochs or rounds).
    pub progress: u64,
    pub extra: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tag: String,
    model: ModelConfig,
    progress: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    adam_steps: BTreeMap<String, u64>,
    dual_round: Option<u64>,
}

const NETS: [&str; 3] = ["go", "gp", "disc"];

fn net<'a>(model: &'a Model, name: &str) -> &'a ParameterSet {
    match name {
        "go" => &model.go,
        "gp" => &model.gp,
        _ => &model.disc,
    }
}

fn net_mut<'a>(model: &'a mut Model, name: &str) -> &'a mut ParameterSet {
    match name {
        "go" => &mut model.go,
        "gp" => &mut model.gp,
        _ => &mut model.disc,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Format(format!("bad rng seed {s:?}"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

impl Checkpoint {
    fn entries(&self) -> BTreeMap<String, &Tensor> {
        let mut out = BTreeMap::new();
        for n in NETS {
            for (name, t) in net(&self.model, n).iter() {
                out.insert(format!("param/{n}/{name}"), t);
            }
        }
        for (n, st) in &self.optim {
            for (name, (m, v)) in &st.moments {
                out.insert(format!("adam/{n}/m/{name}"), m);
                out.insert(format!("adam/{n}/v/{name}"), v);
            }
        }
        if let Some(d) = &self.dual {
            for (id, s) in &d.entries {
                out.insert(format!("dual/{id:08}"), s);
            }
        }
        for (name, t) in &self.extra {
            out.insert(format!("extra/{name}"), t);
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for n in self.optim.keys() {
            if !NETS.contains(&n.as_str()) {
                return Err(Error::State(format!("optimizer state for unknown network {n}")));
            }
        }
        let header = Header {
            tag: self.tag.clone(),
            model: self.model.config,
            progress: self.progress,
            rng_seed: hex(&self.rng.seed),
            rng_stream: self.rng.stream,
            rng_word_pos: self.rng.word_pos.to_string(),
            adam_steps: self.optim.iter().map(|(k, s)| (k.clone(), s.step)).collect(),
            dual_round: self.dual.as_ref().map(|d| d.round),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;

        let hypers: Vec<(String, Tensor)> = self
            .optim
            .iter()
            .map(|(n, s)| (format!("adam/{n}/hyper"), Tensor::from_vec(vec![s.beta1, s.beta2, s.eps])))
            .collect();
        let mut entries = self.entries();
        for (k, t) in &hypers {
            entries.insert(k.clone(), t);
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let hlen = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = r.u64()?;
        let mut raw = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("entry {name} is too large")))?;
            let data_bytes = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?;
            let data = data_bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if raw.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
                return Err(Error::Format(format!("duplicate entry {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        assemble(header, raw)
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves a
    /// half-written file at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn assemble(header: Header, mut raw: BTreeMap<String, Tensor>) -> Result<Checkpoint> {
    let mut model = Model::init(header.model)?;
    for n in NETS {
        let params = net_mut(&mut model, n);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let key = format!("param/{n}/{name}");
            let t = raw
                .remove(&key)
                .ok_or_else(|| Error::Format(format!("missing parameter {key}")))?;
            let slot = params.get_mut(&name).expect("listed name");
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "parameter {key} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
    }

    let mut optim = BTreeMap::new();
    for (n, step) in header.adam_steps {
        if !NETS.contains(&n.as_str()) {
            return Err(Error::Format(format!("optimizer state for unknown network {n}")));
        }
        let hyper = raw
            .remove(&format!("adam/{n}/hyper"))
            .filter(|t| t.len() == 3)
            .ok_or_else(|| Error::Format(format!("missing adam/{n}/hyper")))?;
        let h = hyper.data();
        let mut st = AdamState::new(h[0], h[1], h[2]);
        st.step = step;
        let params = net(&model, &n);
        for (name, p) in params.iter() {
            let m = raw.remove(&format!("adam/{n}/m/{name}"));
            let v = raw.remove(&format!("adam/{n}/v/{name}"));
            match (m, v) {
                (Some(m), Some(v)) if m.shape() == p.shape() && v.shape() == p.shape() => {
                    st.moments.insert(name.clone(), (m, v));
                }
                (None, None) => {}
                _ => return Err(Error::Format(format!("bad adam moments for {n}/{name}"))),
            }
        }
        optim.insert(n, st);
    }

    let mut extra = BTreeMap::new();
    let mut dual_entries = BTreeMap::new();
    for (key, t) in raw {
        if let Some(id) = key.strip_prefix("dual/") {
            let id: usize = id
                .parse()
                .map_err(|_| Error::Format(format!("bad dual entry name {key}")))?;
            dual_entries.insert(id, t);
        } else if let Some(name) = key.strip_prefix("extra/") {
            extra.insert(name.to_string(), t);
        } else {
            return Err(Error::Format(format!("unknown checkpoint entry {key}")));
        }
    }
    let dual = match header.dual_round {
        Some(round) => Some(DualState {
            entries: dual_entries,
            round,
        }),
        None if dual_entries.is_empty() => None,
        None => return Err(Error::Format("dual entries without a dual header".into())),
    };

    Ok(Checkpoint {
        tag: header.tag,
        model,
        optim,
        dual,
        rng: RngState {
            seed: unhex(&header.rng_seed)?,
            stream: header.rng_stream,
            word_pos: header
                .rng_word_pos
                .parse()
                .map_err(|_| Error::Format("bad rng word position".into()))?,
        },
        progress: header.progress,
        extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let model = Model::init(ModelConfig {
            go_blocks: 1,
            gp_blocks: 1,
            channels: 4,
            scale: 2,
            disc_channels: 2,
            seed: 9,
        })
        .unwrap();
        let mut optim = BTreeMap::new();
        let mut st = AdamState::for_params(&model.gp);
        st.step = 7;
        optim.insert("gp".to_string(), st);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rng.random();
        let mut dual = DualState::default();
        dual.entries.insert(3, Tensor::full(&[3, 2, 2], 0.25));
        dual.round = 2;
        Checkpoint {
            tag: "pdadmm".into(),
            model,
            optim,
            dual: Some(dual),
            rng: RngState::capture(&rng),
            progress: 11,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let _: u32 = rng.random();
        let state = RngState::capture(&rng);
        let a: u64 = rng.random();
        let b: u64 = state.restore().random();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn unknown_entry_is_rejected() {
        let mut c = sample();
        c.model.go.insert("stray.w", Tensor::zeros(&[1])).unwrap();
        let bytes = c.to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("stray"), "{err}");
    }
}
