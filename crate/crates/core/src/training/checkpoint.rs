//! `STCKPT1` checkpoints: magic, `u32` version, a length-prefixed
//! `key=value` config block, then every named parameter as
//! `name, ndim, dims…, f64 LE data`. Integers are little-endian `u32`.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::generator::SetRecModel;
use crate::tensor::Tensor;
use crate::tokenizer::CfTable;

const MAGIC: &[u8; 7] = b"STCKPT1";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())
}

fn config_block(model: &SetRecModel) -> String {
    let mut s = model.config().to_kv_text();
    let _ = writeln!(s, "d_sem={}", model.d_sem());
    if let Some(cf) = model.cf() {
        let d_cf = model.store().get(cf.base_id()).cols();
        let _ = writeln!(s, "cf_dim={d_cf}");
        let _ = writeln!(s, "cf_items={}", cf.items().join(" "));
    }
    s
}

pub fn write_checkpoint(model: &SetRecModel, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    put_str(&mut w, &config_block(model))?;
    let store = model.store();
    put_u32(&mut w, store.len())?;
    for (_, name, t) in store.iter() {
        put_str(&mut w, name)?;
        put_u32(&mut w, t.shape().len())?;
        for &s in t.shape() {
            put_u32(&mut w, s)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("checkpoint truncated: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}

pub fn read_checkpoint(r: impl Read) -> Result<SetRecModel> {
    let mut r = Reader { inner: r };
    if r.bytes(7)? != MAGIC {
        return Err(Error::Format("missing STCKPT1 magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let text = r.string()?;
    let mut train_lines = String::new();
    let (mut d_sem, mut cf_dim, mut cf_items) = (0usize, None, Vec::new());
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad config line `{line}`")))?;
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad `{k}` value `{v}`")))
        };
        match k {
            "d_sem" => d_sem = num(v)?,
            "cf_dim" => cf_dim = Some(num(v)?),
            "cf_items" => cf_items = v.split_whitespace().map(str::to_string).collect(),
            _ => {
                train_lines.push_str(line);
                train_lines.push('\n');
            }
        }
    }
    let config = TrainConfig::from_kv_text(&train_lines)?;
    // The placeholder table only fixes shapes; real values come from the file.
    let table = match cf_dim {
        Some(dim) => Some(CfTable::new(cf_items.clone(), Tensor::zeros(&[cf_items.len(), dim]))?),
        None => None,
    };
    let mut model = SetRecModel::new(config, d_sem, table.as_ref())?;
    let count = r.u32()?;
    if count != model.store().len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameters, model expects {}",
            model.store().len()
        )));
    }
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        model.store_mut().set(&name, Tensor::new(shape, data)?)?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &SetRecModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SetRecModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice())
}
