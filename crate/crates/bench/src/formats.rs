//! Plain-text file formats: PNM images and masks, label grids, memory-pool
//! and model checkpoints, and strategy traces.
//!
//! Checkpoints store every float as the 16 lowercase hex digits of its IEEE
//! 754 bit pattern, so a round trip is bit-exact. A pool checkpoint reads:
//!
//! ```text
//! ifss-pool 1
//! dim <D>
//! hyper <locked|mutable>
//! records <N>
//! record <class_id> <session_id>
//! raw_category <D hex words>
//! raw_hyper <D hex words>
//! category <D hex words>
//! hyper <D hex words>
//! ...
//! ```
//!
//! with one `record` block per class in pool order. A model checkpoint
//! reads `ifss-model 1`, then `image_channels`, `widths`, `embed_dim`,
//! `hidden`, `iterations` and `act` lines giving the architecture, then
//! `params <N>` followed by N hex words, one per line, in parameter order.

use std::fmt::Write as _;
use std::io::Write;

use ifss_core::casm::LabelMap;
use ifss_core::eaus::UpdateTrace;
use ifss_core::featext::{BinaryMask, RasterImage};
use ifss_core::membank::{ClassId, ClassRecord, Embedding, MemoryPool};
use ifss_core::numkit::{flatten, unflatten_into, ActKind, ParamSet};
use ifss_core::pipeline::{Model, ModelConfig};

use crate::{BenchError, Context, Result};

pub const POOL_MAGIC: &str = "ifss-pool";
pub const MODEL_MAGIC: &str = "ifss-model";
pub const LABELS_MAGIC: &str = "ifss-labels";
pub const FORMAT_VERSION: u32 = 1;

fn fmt_err(msg: impl Into<String>) -> BenchError {
    BenchError::Format(msg.into())
}

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unhex(word: &str) -> Result<f64> {
    if word.len() != 16 {
        return Err(fmt_err(format!("expected 16 hex digits, got {word:?}")));
    }
    u64::from_str_radix(word, 16)
        .map(f64::from_bits)
        .map_err(|_| fmt_err(format!("bad hex word {word:?}")))
}

fn parse<T: std::str::FromStr>(word: Option<&str>, what: &str) -> Result<T> {
    word.and_then(|w| w.parse().ok()).ok_or_else(|| fmt_err(format!("missing or invalid {what}")))
}

/// Line cursor over a text file that skips blank lines.
struct Lines<'a> {
    inner: std::iter::Filter<std::str::Lines<'a>, fn(&&str) -> bool>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().filter(|l| !l.trim().is_empty()),
        }
    }

    /// Next line, which must start with `key`; returns the remaining words.
    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.inner.next().ok_or_else(|| fmt_err(format!("missing `{key}` line")))?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some(k) if k == key => Ok(words.collect()),
            other => Err(fmt_err(format!("expected `{key}`, found {other:?}"))),
        }
    }

    fn header(&mut self, magic: &str) -> Result<()> {
        let rest = self.keyed(magic)?;
        let version: u32 = parse(rest.first().copied(), "format version")?;
        if version != FORMAT_VERSION {
            return Err(fmt_err(format!("{magic} version {version} is not supported")));
        }
        Ok(())
    }
}

fn hex_line(out: &mut String, key: &str, values: &[f64]) {
    out.push_str(key);
    for &v in values {
        out.push(' ');
        out.push_str(&hex(v));
    }
    out.push('\n');
}

fn read_embedding(lines: &mut Lines, key: &str, dim: usize) -> Result<Embedding> {
    let words = lines.keyed(key)?;
    if words.len() != dim {
        return Err(fmt_err(format!("`{key}` has {} values, dim is {dim}", words.len())));
    }
    let values = words.into_iter().map(unhex).collect::<Result<Vec<_>>>()?;
    Embedding::new(values).context(|| format!("`{key}` values"))
}

pub fn pool_to_string(pool: &MemoryPool) -> String {
    let mut out = format!("{POOL_MAGIC} {FORMAT_VERSION}\n");
    let _ = writeln!(out, "dim {}", pool.dim().unwrap_or(0));
    let _ = writeln!(out, "hyper {}", if pool.hyper_is_mutable() { "mutable" } else { "locked" });
    let _ = writeln!(out, "records {}", pool.len());
    for r in pool.records() {
        let _ = writeln!(out, "record {} {}", r.class_id().0, r.session_id());
        hex_line(&mut out, "raw_category", r.raw_category());
        hex_line(&mut out, "raw_hyper", r.raw_hyper());
        hex_line(&mut out, "category", r.category());
        hex_line(&mut out, "hyper", r.hyper());
    }
    out
}

pub fn pool_from_str(text: &str) -> Result<MemoryPool> {
    let mut lines = Lines::new(text);
    lines.header(POOL_MAGIC)?;
    let dim: usize = parse(lines.keyed("dim")?.first().copied(), "dim")?;
    let mut pool = match lines.keyed("hyper")?.first().copied() {
        Some("locked") => MemoryPool::new(),
        Some("mutable") => MemoryPool::with_mutable_hyper(),
        other => return Err(fmt_err(format!("hyper must be locked or mutable, found {other:?}"))),
    };
    let n: usize = parse(lines.keyed("records")?.first().copied(), "record count")?;
    for _ in 0..n {
        let head = lines.keyed("record")?;
        let id: u32 = parse(head.first().copied(), "class id")?;
        let session: u32 = parse(head.get(1).copied(), "session id")?;
        let raw_c = read_embedding(&mut lines, "raw_category", dim)?;
        let raw_h = read_embedding(&mut lines, "raw_hyper", dim)?;
        let ec = read_embedding(&mut lines, "category", dim)?;
        let eh = read_embedding(&mut lines, "hyper", dim)?;
        let record = ClassRecord::new(ClassId(id), session, raw_c, raw_h, ec, eh).context(|| format!("record {id}"))?;
        pool.insert_record(record).context(|| format!("record {id}"))?;
    }
    if lines.inner.next().is_some() {
        return Err(fmt_err("trailing content after the last record"));
    }
    Ok(pool)
}

pub fn model_to_string(model: &Model, cfg: &ModelConfig) -> String {
    let mut out = format!("{MODEL_MAGIC} {FORMAT_VERSION}\n");
    let widths: Vec<String> = cfg.widths.iter().map(usize::to_string).collect();
    let act = match cfg.act {
        ActKind::Relu => "relu",
        ActKind::Silu => "silu",
    };
    let _ = write!(
        out,
        "image_channels {}\nwidths {}\nembed_dim {}\nhidden {}\niterations {}\nact {act}\n",
        cfg.image_channels,
        widths.join(" "),
        cfg.embed_dim,
        cfg.hidden,
        cfg.iterations
    );
    let params = flatten(model);
    let _ = writeln!(out, "params {}", params.len());
    for v in params {
        out.push_str(&hex(v));
        out.push('\n');
    }
    out
}

pub fn model_from_str(text: &str) -> Result<(Model, ModelConfig)> {
    let mut lines = Lines::new(text);
    lines.header(MODEL_MAGIC)?;
    let image_channels = parse(lines.keyed("image_channels")?.first().copied(), "image_channels")?;
    let widths = lines.keyed("widths")?.into_iter().map(|w| parse(Some(w), "width")).collect::<Result<Vec<usize>>>()?;
    let embed_dim = parse(lines.keyed("embed_dim")?.first().copied(), "embed_dim")?;
    let hidden = parse(lines.keyed("hidden")?.first().copied(), "hidden")?;
    let iterations = parse(lines.keyed("iterations")?.first().copied(), "iterations")?;
    let act = match lines.keyed("act")?.first().copied() {
        Some("relu") => ActKind::Relu,
        Some("silu") => ActKind::Silu,
        other => return Err(fmt_err(format!("unknown activation {other:?}"))),
    };
    let cfg = ModelConfig {
        image_channels,
        widths,
        embed_dim,
        hidden,
        iterations,
        act,
    };
    let mut model = Model::init(&cfg, 0).context(|| "model architecture".into())?;
    let n: usize = parse(lines.keyed("params")?.first().copied(), "parameter count")?;
    if n != model.num_params() {
        return Err(fmt_err(format!("{n} parameters stored, architecture has {}", model.num_params())));
    }
    let values = lines.inner.by_ref().map(|l| unhex(l.trim())).collect::<Result<Vec<_>>>()?;
    if values.len() != n {
        return Err(fmt_err(format!("expected {n} parameter values, found {}", values.len())));
    }
    unflatten_into(&mut model, &values);
    Ok((model, cfg))
}

fn pnm_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Plain PNM: `P3` for three channels, `P2` for one, maxval 255.
pub fn write_pnm<W: Write>(mut w: W, img: &RasterImage) -> Result<()> {
    let (c, h, wd) = (img.channels(), img.height(), img.width());
    let magic = match c {
        1 => "P2",
        3 => "P3",
        _ => return Err(fmt_err(format!("PNM holds 1 or 3 channels, image has {c}"))),
    };
    writeln!(w, "{magic}\n{wd} {h}\n255")?;
    let hw = h * wd;
    let d = img.data();
    for y in 0..h {
        let row: Vec<String> = (0..wd)
            .flat_map(|x| (0..c).map(move |ch| pnm_byte(d[ch * hw + y * wd + x]).to_string()))
            .collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

fn pnm_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(|l| l.split('#').next().unwrap_or("")).flat_map(str::split_whitespace)
}

/// Reads a plain `P2`/`P3` file, scaling samples by the maxval.
pub fn read_pnm(text: &str) -> Result<RasterImage> {
    let mut t = pnm_tokens(text);
    let channels = match t.next() {
        Some("P2") => 1,
        Some("P3") => 3,
        other => return Err(fmt_err(format!("not a plain PNM file: {other:?}"))),
    };
    let w: usize = parse(t.next(), "PNM width")?;
    let h: usize = parse(t.next(), "PNM height")?;
    let maxval: u32 = parse(t.next(), "PNM maxval")?;
    if maxval == 0 {
        return Err(fmt_err("PNM maxval must be positive"));
    }
    let hw = h * w;
    let mut data = vec![0.0; channels * hw];
    for i in 0..hw {
        for ch in 0..channels {
            let v: u32 = parse(t.next(), "PNM sample")?;
            if v > maxval {
                return Err(fmt_err(format!("PNM sample {v} exceeds maxval {maxval}")));
            }
            data[ch * hw + i] = f64::from(v) / f64::from(maxval);
        }
    }
    RasterImage::new(channels, h, w, data).context(|| "PNM image".into())
}

/// Masks are `P2` files with maxval 1.
pub fn write_mask<W: Write>(mut w: W, mask: &BinaryMask) -> Result<()> {
    writeln!(w, "P2\n{} {}\n1", mask.width(), mask.height())?;
    for row in mask.data().chunks(mask.width()) {
        let cells: Vec<&str> = row.iter().map(|&m| if m { "1" } else { "0" }).collect();
        writeln!(w, "{}", cells.join(" "))?;
    }
    Ok(())
}

pub fn read_mask(text: &str) -> Result<BinaryMask> {
    let img = read_pnm(text)?;
    if img.channels() != 1 {
        return Err(fmt_err("mask must be a single-channel P2 file"));
    }
    BinaryMask::new(img.height(), img.width(), img.data().iter().map(|&v| v > 0.5).collect()).context(|| "mask".into())
}

/// Label grid: header `ifss-labels 1`, then `<height> <width>`, then one
/// row of class ids per line with `-1` for background.
pub fn write_labels<W: Write>(mut w: W, labels: &LabelMap) -> Result<()> {
    writeln!(w, "{LABELS_MAGIC} {FORMAT_VERSION}\n{} {}", labels.height(), labels.width())?;
    for row in labels.data().chunks(labels.width()) {
        let cells: Vec<String> = row.iter().map(|l| l.map_or("-1".to_string(), |c| c.0.to_string())).collect();
        writeln!(w, "{}", cells.join(" "))?;
    }
    Ok(())
}

pub fn read_labels(text: &str) -> Result<LabelMap> {
    let mut lines = Lines::new(text);
    lines.header(LABELS_MAGIC)?;
    let dims = lines.inner.next().ok_or_else(|| fmt_err("missing label grid size"))?;
    let mut d = dims.split_whitespace();
    let h: usize = parse(d.next(), "grid height")?;
    let w: usize = parse(d.next(), "grid width")?;
    let mut data = Vec::with_capacity(h * w);
    for word in lines.inner.flat_map(str::split_whitespace) {
        let v: i64 = parse(Some(word), "label")?;
        data.push(match v {
            -1 => None,
            v => Some(ClassId(u32::try_from(v).map_err(|_| fmt_err(format!("invalid label {v}")))?)),
        });
    }
    LabelMap::new(h, w, data).context(|| "label grid".into())
}

/// Strategy traces as CSV rows `session,class_id,displacement_norm`.
pub fn write_traces<W: Write>(out: W, traces: &[UpdateTrace]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["session", "class_id", "displacement_norm"])?;
    for (session, trace) in traces.iter().enumerate() {
        for (id, norm) in trace.class_ids.iter().zip(trace.displacement_norms()) {
            w.write_record([session.to_string(), id.0.to_string(), format!("{norm:.9e}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_words_are_exact() {
        for v in [0.0, -0.0, 1.0 / 3.0, f64::MIN_POSITIVE, -1.5e300] {
            assert_eq!(unhex(&hex(v)).unwrap().to_bits(), v.to_bits());
        }
        assert!(unhex("12").is_err());
        assert!(unhex("zzzzzzzzzzzzzzzz").is_err());
    }

    #[test]
    fn label_grid_round_trip() {
        let labels = LabelMap::new(2, 3, vec![None, Some(ClassId(4)), None, Some(ClassId(0)), None, Some(ClassId(12))]).unwrap();
        let mut buf = Vec::new();
        write_labels(&mut buf, &labels).unwrap();
        assert_eq!(read_labels(std::str::from_utf8(&buf).unwrap()).unwrap(), labels);
    }

    #[test]
    fn mask_round_trip() {
        let mask = BinaryMask::from_fn(3, 5, |y, x| (x + y) % 2 == 0);
        let mut buf = Vec::new();
        write_mask(&mut buf, &mask).unwrap();
        assert_eq!(read_mask(std::str::from_utf8(&buf).unwrap()).unwrap(), mask);
    }

    #[test]
    fn pnm_rejects_garbage() {
        assert!(read_pnm("P6\n1 1\n255\n0 0 0").is_err());
        assert!(read_pnm("P2\n2 1\n255\n0").is_err());
        assert!(read_pnm("P2\n1 1\n1\n7").is_err());
    }
}
