//! External formats: COCO annotation/result JSON, binary feature dumps,
//! checkpoints and JSON reports.
//!
//! Binary layouts are little-endian with an explicit version and CRC-32.
//!
//! Feature dump:
//!
//! ```text
//! "RFBX" | version u32 | level_count u32 | record_count u64 | crc32(header) u32
//! record*: image_id u64 | width u32 | height u32
//!          | level*: stride u32 | C u32 | H u32 | W u32 | C·H·W × f32
//!          | crc32(record) u32
//! ```
//!
//! Checkpoint:
//!
//! ```text
//! "RFCK" | version u32 | header_len u32 | header (JSON) | payload_len u64
//!        | payload (f32 tensors) | crc32(everything before) u32
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::detection::{Detection, GtInstance, ImageSize};
use crate::error::{Error, Result};
use crate::eval::ImageSizes;
use crate::geometry::BBox;
use crate::net::{FeaturePyramid, PyramidLevel, RefinerConfig, RefinerParams};
use crate::tensor::Tensor;
use crate::train::TrainSample;

pub const DUMP_MAGIC: [u8; 4] = *b"RFBX";
pub const DUMP_VERSION: u32 = 1;
pub const CKPT_MAGIC: [u8; 4] = *b"RFCK";
pub const CKPT_VERSION: u32 = 1;

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(tmp.path(), fs::Permissions::from_mode(0o644))
            .map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

/// A COCO-format ground-truth file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<GtInstance>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    pub fn category_ids(&self) -> Vec<u64> {
        self.categories.iter().map(|c| c.id).collect()
    }

    pub fn image_sizes(&self) -> ImageSizes {
        self.images
            .iter()
            .map(|i| (i.id, ImageSize::new(i.width as f64, i.height as f64)))
            .collect()
    }
}

/// A JSON value together with its location, for error messages.
#[derive(Clone, Copy)]
struct At<'a> {
    v: &'a Value,
    origin: &'a str,
    path: &'a str,
}

impl<'a> At<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        let path = if self.path.is_empty() { "$" } else { self.path };
        Error::data(format!("{}: {path}", self.origin), msg)
    }

    fn object(&self) -> Result<&'a Map<String, Value>> {
        self.v
            .as_object()
            .ok_or_else(|| self.err("expected an object"))
    }

    fn array(&self) -> Result<&'a Vec<Value>> {
        self.v
            .as_array()
            .ok_or_else(|| self.err("expected an array"))
    }

    fn u64(&self) -> Result<u64> {
        if let Some(v) = self.v.as_u64() {
            return Ok(v);
        }
        // integral floats such as 3.0 are accepted
        match self.v.as_f64() {
            Some(f) if f >= 0.0 && f.fract() == 0.0 && f < 2f64.powi(53) => Ok(f as u64),
            _ => Err(self.err("expected a non-negative integer")),
        }
    }

    fn f64(&self) -> Result<f64> {
        match self.v.as_f64() {
            Some(f) if f.is_finite() => Ok(f),
            _ => Err(self.err("expected a finite number")),
        }
    }

    fn str(&self) -> Result<&'a str> {
        self.v.as_str().ok_or_else(|| self.err("expected a string"))
    }
}

/// Reads `key` of `obj` through `f`, with the field's path in any error.
fn get<'a, T>(
    obj: &'a Map<String, Value>,
    at: &At<'a>,
    key: &str,
    f: impl FnOnce(&At<'_>) -> Result<T>,
) -> Result<T> {
    let path = field_path(at.path, key);
    let v = obj
        .get(key)
        .ok_or_else(|| at.err(format!("missing field `{key}`")))?;
    f(&At {
        v,
        origin: at.origin,
        path: &path,
    })
}

fn field_path(parent: &str, key: &str) -> String {
    if parent.is_empty() {
        key.to_string()
    } else {
        format!("{parent}.{key}")
    }
}

/// Like `get` for a top-level array, borrowed from the document.
fn get_array<'a>(obj: &'a Map<String, Value>, at: &At<'a>, key: &str) -> Result<&'a Vec<Value>> {
    let path = field_path(at.path, key);
    let v = obj
        .get(key)
        .ok_or_else(|| at.err(format!("missing field `{key}`")))?;
    v.as_array().ok_or_else(|| {
        At {
            v,
            origin: at.origin,
            path: &path,
        }
        .err("expected an array")
    })
}

fn get_opt<'a, T>(
    obj: &'a Map<String, Value>,
    at: &At<'a>,
    key: &str,
    f: impl FnOnce(&At<'_>) -> Result<T>,
) -> Result<Option<T>> {
    if obj.get(key).is_none_or(Value::is_null) {
        return Ok(None);
    }
    get(obj, at, key, f).map(Some)
}

fn parse_xywh(at: &At<'_>) -> Result<BBox> {
    let arr = at.array()?;
    if arr.len() != 4 {
        return Err(at.err(format!("expected [x, y, w, h], got {} values", arr.len())));
    }
    let mut v = [0.0; 4];
    for (i, x) in arr.iter().enumerate() {
        let p = format!("{}[{i}]", at.path);
        v[i] = At {
            v: x,
            origin: at.origin,
            path: &p,
        }
        .f64()?;
    }
    if v[2] < 0.0 || v[3] < 0.0 {
        return Err(at.err(format!("negative extent w={} h={}", v[2], v[3])));
    }
    BBox::from_xywh(v[0], v[1], v[2], v[3]).map_err(|e| at.err(e.to_string()))
}

fn parse_json(bytes: &[u8], path: &Path) -> Result<Value> {
    serde_json::from_slice(bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a COCO ground-truth document. `origin` names the source in errors.
pub fn parse_coco(doc: &Value, origin: &str) -> Result<CocoDataset> {
    let root = At {
        v: doc,
        origin,
        path: "",
    };
    let obj = root.object()?;
    let mut ds = CocoDataset::default();

    let images = get_array(obj, &root, "images")?;
    for (i, v) in images.iter().enumerate() {
        let p = format!("images[{i}]");
        let at = At {
            v,
            origin,
            path: &p,
        };
        let o = at.object()?;
        let dim = |a: &At<'_>| {
            let d = a.u64()?;
            u32::try_from(d).map_err(|_| a.err("image dimension too large"))
        };
        ds.images.push(CocoImage {
            id: get(o, &at, "id", |a| a.u64())?,
            width: get(o, &at, "width", dim)?,
            height: get(o, &at, "height", dim)?,
            file_name: get_opt(o, &at, "file_name", |a| a.str().map(str::to_string))?
                .unwrap_or_default(),
        });
    }

    let cats = get_array(obj, &root, "categories")?;
    for (i, v) in cats.iter().enumerate() {
        let p = format!("categories[{i}]");
        let at = At {
            v,
            origin,
            path: &p,
        };
        let o = at.object()?;
        ds.categories.push(CocoCategory {
            id: get(o, &at, "id", |a| a.u64())?,
            name: get_opt(o, &at, "name", |a| a.str().map(str::to_string))?.unwrap_or_default(),
        });
    }

    let image_ids = unique_ids(ds.images.iter().map(|i| i.id), origin, "images")?;
    let cat_ids = unique_ids(ds.categories.iter().map(|c| c.id), origin, "categories")?;

    let anns = get_array(obj, &root, "annotations")?;
    let mut ann_ids = BTreeSet::new();
    for (i, v) in anns.iter().enumerate() {
        let p = format!("annotations[{i}]");
        let at = At {
            v,
            origin,
            path: &p,
        };
        let o = at.object()?;
        let id = get(o, &at, "id", |a| a.u64())?;
        let image_id = get(o, &at, "image_id", |a| a.u64())?;
        let category_id = get(o, &at, "category_id", |a| a.u64())?;
        let bbox = get(o, &at, "bbox", parse_xywh)?;
        if !image_ids.contains(&image_id) {
            return Err(at.err(format!("image_id {image_id} does not exist")));
        }
        if !cat_ids.contains(&category_id) {
            return Err(at.err(format!("category_id {category_id} does not exist")));
        }
        if !ann_ids.insert(id) {
            return Err(at.err(format!("duplicate annotation id {id}")));
        }
        let mut g = GtInstance::new(id, image_id, category_id, bbox);
        if let Some(area) = get_opt(o, &at, "area", |a| a.f64())? {
            g.area = area;
        }
        g.iscrowd = get_opt(o, &at, "iscrowd", |a| match a.v {
            Value::Bool(b) => Ok(*b),
            _ => match a.u64()? {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(a.err("iscrowd must be 0 or 1")),
            },
        })?
        .unwrap_or(false);
        ds.annotations.push(g);
    }
    Ok(ds)
}

fn unique_ids(ids: impl Iterator<Item = u64>, origin: &str, what: &str) -> Result<BTreeSet<u64>> {
    let mut set = BTreeSet::new();
    for id in ids {
        if !set.insert(id) {
            return Err(Error::data(
                format!("{origin}: {what}"),
                format!("duplicate id {id}"),
            ));
        }
    }
    Ok(set)
}

pub fn load_coco(path: &Path) -> Result<CocoDataset> {
    let doc = parse_json(&read_file(path)?, path)?;
    parse_coco(&doc, &path.display().to_string())
}

pub fn coco_to_json(ds: &CocoDataset) -> Value {
    let images = ds
        .images
        .iter()
        .map(|i| serde_json::to_value(i).expect("plain struct"))
        .collect();
    let annotations = ds
        .annotations
        .iter()
        .map(|g| {
            let mut o = Map::new();
            o.insert("id".into(), g.id.into());
            o.insert("image_id".into(), g.image_id.into());
            o.insert("category_id".into(), g.category_id.into());
            o.insert("bbox".into(), g.bbox.to_xywh().to_vec().into());
            o.insert("area".into(), g.area.into());
            o.insert("iscrowd".into(), u64::from(g.iscrowd).into());
            Value::Object(o)
        })
        .collect();
    let categories = ds
        .categories
        .iter()
        .map(|c| serde_json::to_value(c).expect("plain struct"))
        .collect();
    let mut root = Map::new();
    root.insert("images".into(), Value::Array(images));
    root.insert("annotations".into(), Value::Array(annotations));
    root.insert("categories".into(), Value::Array(categories));
    Value::Object(root)
}

pub fn save_coco(ds: &CocoDataset, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&coco_to_json(ds)).expect("serializable");
    write_atomic(path, text.as_bytes())
}

const RESULT_KEYS: [&str; 5] = ["image_id", "category_id", "bbox", "score", "class_probs"];

/// Parses a COCO results array. With `ds`, image and category ids must
/// resolve against it.
pub fn parse_results(
    doc: &Value,
    origin: &str,
    ds: Option<&CocoDataset>,
) -> Result<Vec<Detection>> {
    let root = At {
        v: doc,
        origin,
        path: "",
    };
    let (images, cats) = match ds {
        Some(d) => (
            Some(d.images.iter().map(|i| i.id).collect::<BTreeSet<_>>()),
            Some(d.category_ids().into_iter().collect::<BTreeSet<_>>()),
        ),
        None => (None, None),
    };
    let mut out = Vec::new();
    for (i, v) in root.array()?.iter().enumerate() {
        let p = format!("[{i}]");
        let at = At {
            v,
            origin,
            path: &p,
        };
        let o = at.object()?;
        let image_id = get(o, &at, "image_id", |a| a.u64())?;
        let category_id = get(o, &at, "category_id", |a| a.u64())?;
        let bbox = get(o, &at, "bbox", parse_xywh)?;
        let score = get(o, &at, "score", |a| {
            let s = a.f64()?;
            if (0.0..=1.0).contains(&s) {
                Ok(s)
            } else {
                Err(a.err(format!("score {s} outside [0, 1]")))
            }
        })?;
        if images.as_ref().is_some_and(|s| !s.contains(&image_id)) {
            return Err(at.err(format!("image_id {image_id} does not exist")));
        }
        if cats.as_ref().is_some_and(|s| !s.contains(&category_id)) {
            return Err(at.err(format!("category_id {category_id} does not exist")));
        }
        let class_probs = get_opt(o, &at, "class_probs", |a| {
            let mut m = BTreeMap::new();
            for (k, v) in a.object()? {
                let p = format!("{}.{k}", a.path);
                let kat = At {
                    v,
                    origin: a.origin,
                    path: &p,
                };
                let id: u64 = k
                    .parse()
                    .map_err(|_| kat.err("class_probs keys must be category ids"))?;
                m.insert(id, kat.f64()?);
            }
            Ok(m)
        })?;
        let mut d = Detection::new(image_id, category_id, score, bbox);
        d.class_probs = class_probs;
        for (k, v) in o {
            if !RESULT_KEYS.contains(&k.as_str()) {
                d.extra.insert(k.clone(), v.clone());
            }
        }
        out.push(d);
    }
    Ok(out)
}

pub fn load_results(path: &Path, ds: Option<&CocoDataset>) -> Result<Vec<Detection>> {
    let doc = parse_json(&read_file(path)?, path)?;
    parse_results(&doc, &path.display().to_string(), ds)
}

pub fn results_to_json(dets: &[Detection]) -> Value {
    Value::Array(
        dets.iter()
            .map(|d| {
                let mut o = Map::new();
                o.insert("image_id".into(), d.image_id.into());
                o.insert("category_id".into(), d.category_id.into());
                o.insert("bbox".into(), d.bbox.to_xywh().to_vec().into());
                o.insert("score".into(), d.score.into());
                if let Some(p) = &d.class_probs {
                    let m: Map<String, Value> = p
                        .iter()
                        .map(|(k, v)| (k.to_string(), (*v).into()))
                        .collect();
                    o.insert("class_probs".into(), Value::Object(m));
                }
                for (k, v) in &d.extra {
                    o.insert(k.clone(), v.clone());
                }
                Value::Object(o)
            })
            .collect(),
    )
}

pub fn save_results(dets: &[Detection], path: &Path) -> Result<()> {
    let text = serde_json::to_string(&results_to_json(dets)).expect("serializable");
    write_atomic(path, text.as_bytes())
}

/// Splits samples into a ground-truth file, predictions and dump records.
pub fn export_samples(
    samples: &[TrainSample],
    categories: &[u64],
) -> (CocoDataset, Vec<Detection>, Vec<DumpRecord>) {
    let images = samples
        .iter()
        .map(|s| CocoImage {
            id: s.image_id,
            width: s.backbone.image_width,
            height: s.backbone.image_height,
            file_name: format!("{:012}.png", s.image_id),
        })
        .collect();
    let ds = CocoDataset {
        images,
        annotations: samples.iter().flat_map(|s| s.gts.iter().cloned()).collect(),
        categories: categories
            .iter()
            .map(|&id| CocoCategory {
                id,
                name: format!("class{id}"),
            })
            .collect(),
    };
    let preds = samples
        .iter()
        .flat_map(|s| s.predictions.iter().cloned())
        .collect();
    let records = samples
        .iter()
        .map(|s| DumpRecord {
            image_id: s.image_id,
            pyramid: s.backbone.clone(),
        })
        .collect();
    (ds, preds, records)
}

/// Joins a ground-truth file, predictions and dump records into one sample
/// per image, in image order. Every image needs exactly one record whose
/// size matches the image.
pub fn assemble_samples(
    ds: &CocoDataset,
    preds: &[Detection],
    records: Vec<DumpRecord>,
) -> Result<Vec<TrainSample>> {
    let mut by_id: BTreeMap<u64, FeaturePyramid<f32>> = BTreeMap::new();
    for r in records {
        if !ds.images.iter().any(|i| i.id == r.image_id) {
            return Err(Error::data(
                "features",
                format!("record for image {} not in the ground truth", r.image_id),
            ));
        }
        if by_id.insert(r.image_id, r.pyramid).is_some() {
            return Err(Error::data(
                "features",
                format!("duplicate record for image {}", r.image_id),
            ));
        }
    }
    let mut samples = Vec::with_capacity(ds.images.len());
    for img in &ds.images {
        let backbone = by_id
            .remove(&img.id)
            .ok_or_else(|| Error::data("features", format!("no record for image {}", img.id)))?;
        if (backbone.image_width, backbone.image_height) != (img.width, img.height) {
            return Err(Error::data(
                "features",
                format!(
                    "image {} is {}x{} but its record is {}x{}",
                    img.id, img.width, img.height, backbone.image_width, backbone.image_height
                ),
            ));
        }
        samples.push(TrainSample {
            image_id: img.id,
            image: ImageSize::new(img.width as f64, img.height as f64),
            backbone,
            predictions: preds
                .iter()
                .filter(|d| d.image_id == img.id)
                .cloned()
                .collect(),
            gts: ds
                .annotations
                .iter()
                .filter(|g| g.image_id == img.id)
                .cloned()
                .collect(),
        });
    }
    Ok(samples)
}

/// Features of one image in a dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub image_id: u64,
    pub pyramid: FeaturePyramid<f32>,
}

/// Little-endian reader over a byte slice that never reads past the end.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn push_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Corrupt(format!("{what} {v} does not fit 32 bits")))
}

pub fn encode_dump(records: &[DumpRecord]) -> Result<Vec<u8>> {
    let level_count = records.first().map_or(0, |r| r.pyramid.levels.len());
    let mut out = Vec::new();
    out.extend_from_slice(&DUMP_MAGIC);
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_field(level_count, "level count")?.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    for r in records {
        if r.pyramid.levels.len() != level_count {
            return Err(Error::Shape {
                op: "encode_dump",
                detail: format!(
                    "image {} has {} levels, dump has {level_count}",
                    r.image_id,
                    r.pyramid.levels.len()
                ),
            });
        }
        let start = out.len();
        out.extend_from_slice(&r.image_id.to_le_bytes());
        out.extend_from_slice(&r.pyramid.image_width.to_le_bytes());
        out.extend_from_slice(&r.pyramid.image_height.to_le_bytes());
        for l in &r.pyramid.levels {
            let (c, h, w) = l.features.chw("encode_dump")?;
            out.extend_from_slice(&l.stride.to_le_bytes());
            for d in [c, h, w] {
                out.extend_from_slice(&u32_field(d, "dimension")?.to_le_bytes());
            }
            push_f32s(&mut out, l.features.data());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dump(bytes: &[u8]) -> Result<Vec<DumpRecord>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != DUMP_MAGIC {
        return Err(Error::Corrupt("not a feature dump (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != DUMP_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DUMP_VERSION,
        });
    }
    let level_count = r.u32("level count")? as usize;
    let record_count = r.u64("record count")?;
    let header_crc = crc32fast::hash(&bytes[..r.pos]);
    if r.u32("header checksum")? != header_crc {
        return Err(Error::Checksum("feature dump header".into()));
    }
    // every record needs at least its fixed fields and checksum
    let min_record = 16 + 16 * level_count + 4;
    if record_count > (r.remaining() / min_record) as u64 {
        return Err(Error::Corrupt(format!(
            "{record_count} records declared but only {} bytes follow",
            r.remaining()
        )));
    }
    let mut out = Vec::with_capacity(record_count as usize);
    for k in 0..record_count {
        let start = r.pos;
        let image_id = r.u64("image id")?;
        let image_width = r.u32("image width")?;
        let image_height = r.u32("image height")?;
        let mut levels = Vec::with_capacity(level_count);
        for _ in 0..level_count {
            let stride = r.u32("stride")?;
            let c = r.u32("channels")? as usize;
            let h = r.u32("height")? as usize;
            let w = r.u32("width")? as usize;
            let n = c
                .checked_mul(h)
                .and_then(|v| v.checked_mul(w))
                .and_then(|v| v.checked_mul(4))
                .ok_or_else(|| Error::Corrupt(format!("record {k}: level size overflows")))?;
            let data = read_f32s(r.take(n, "level data")?);
            levels.push(PyramidLevel {
                features: Tensor::from_vec(&[c, h, w], data)?,
                stride,
            });
        }
        let crc = crc32fast::hash(&bytes[start..r.pos]);
        if r.u32("record checksum")? != crc {
            return Err(Error::Checksum(format!(
                "feature dump record {k} (image {image_id})"
            )));
        }
        let pyramid = FeaturePyramid {
            levels,
            image_width,
            image_height,
        };
        pyramid
            .validate()
            .map_err(|e| Error::Corrupt(format!("record {k} (image {image_id}): {e}")))?;
        out.push(DumpRecord { image_id, pyramid });
    }
    if r.remaining() != 0 {
        return Err(Error::Corrupt(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

pub fn write_dump(path: &Path, records: &[DumpRecord]) -> Result<()> {
    write_atomic(path, &encode_dump(records)?)
}

pub fn read_dump(path: &Path) -> Result<Vec<DumpRecord>> {
    decode_dump(&read_file(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CkptHeader {
    config: RefinerConfig,
    in_channels: Vec<usize>,
    tensors: Vec<ManifestEntry>,
}

pub fn encode_ckpt(params: &RefinerParams<f32>, cfg: &RefinerConfig) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(params.num_params() * 4);
    let mut tensors = Vec::new();
    for (name, t) in params.named() {
        tensors.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        push_f32s(&mut payload, t.data());
    }
    let header = serde_json::to_vec(&CkptHeader {
        config: cfg.clone(),
        in_channels: params.in_channels(),
        tensors,
    })
    .expect("serializable");
    let mut out = Vec::with_capacity(payload.len() + header.len() + 32);
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_field(header.len(), "header length")?.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_ckpt(bytes: &[u8]) -> Result<(RefinerParams<f32>, RefinerConfig)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CKPT_MAGIC {
        return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let header_len = r.u32("header length")? as usize;
    let header = r.take(header_len, "header")?;
    let payload_len = r.u64("payload length")?;
    if payload_len != (r.remaining() as u64).wrapping_sub(4) || r.remaining() < 4 {
        return Err(Error::Corrupt(format!(
            "payload length {payload_len} disagrees with file size"
        )));
    }
    let payload = r.take(payload_len as usize, "payload")?;
    let crc = crc32fast::hash(&bytes[..r.pos]);
    if r.u32("checksum")? != crc {
        return Err(Error::Checksum("checkpoint".into()));
    }
    let header: CkptHeader = serde_json::from_slice(header)
        .map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
    let mut params = RefinerParams::<f32>::init(&header.config, &header.in_channels, 0)
        .map_err(|e| Error::Corrupt(format!("checkpoint config: {e}")))?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    if names.len() != header.tensors.len() {
        return Err(Error::Corrupt(format!(
            "manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            names.len()
        )));
    }
    let mut expected_offset = 0u64;
    for ((t, entry), name) in params
        .tensors_mut()
        .into_iter()
        .zip(&header.tensors)
        .zip(&names)
    {
        if &entry.name != name || entry.shape != t.shape() {
            return Err(Error::Corrupt(format!(
                "manifest entry {} {:?} does not match {name} {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        if entry.offset != expected_offset {
            return Err(Error::Corrupt(format!(
                "tensor {name} at offset {}, expected {expected_offset}",
                entry.offset
            )));
        }
        let n = t.numel() * 4;
        let end = expected_offset + n as u64;
        if end > payload_len {
            return Err(Error::Corrupt(format!(
                "tensor {name} runs past the payload"
            )));
        }
        let src = &payload[expected_offset as usize..end as usize];
        t.data_mut().copy_from_slice(&read_f32s(src));
        expected_offset = end;
    }
    if expected_offset != payload_len {
        return Err(Error::Corrupt(format!(
            "{} unused payload bytes",
            payload_len - expected_offset
        )));
    }
    Ok((params, header.config))
}

pub fn save_ckpt(path: &Path, params: &RefinerParams<f32>, cfg: &RefinerConfig) -> Result<()> {
    write_atomic(path, &encode_ckpt(params, cfg)?)
}

pub fn load_ckpt(path: &Path) -> Result<(RefinerParams<f32>, RefinerConfig)> {
    decode_ckpt(&read_file(path)?)
}

/// Rounds to `digits` significant decimal digits.
pub fn round_sig(v: f64, digits: usize) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{:.*e}", digits.saturating_sub(1), v)
        .parse()
        .unwrap_or(v)
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let r = round_sig(n.as_f64().expect("f64"), 6);
            if let Some(num) = serde_json::Number::from_f64(r) {
                *n = num;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_floats),
        Value::Object(o) => o.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// Pretty JSON with every float rounded to six significant digits.
pub fn report_json<T: Serialize>(v: &T) -> String {
    let mut value = serde_json::to_value(v).expect("serializable report");
    round_floats(&mut value);
    let mut s = serde_json::to_string_pretty(&value).expect("serializable");
    s.push('\n');
    s
}

pub fn write_report<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_atomic(path, report_json(v).as_bytes())
}
