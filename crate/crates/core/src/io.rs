//! File formats and layer export.
//!
//! All binary formats start with an ASCII header terminated by `\n`,
//! followed by one `name tag` line per layer or channel, followed by
//! little-endian `f32` payload:
//!
//! ```text
//! MMEM1 <width> <height> <resolution> <center_x> <center_y> <layers>
//! <name> <geometric|multimodal|plugin>          (one per layer)
//! layer-major cell values, row-major within a layer
//!
//! MMPC1 <points> <channels>
//! <name> <raw|probability|one_hot|feature>      (one per channel)
//! point-major rows: x y z ch_0 .. ch_{C-1}
//!
//! MMIM1 <height> <width> <channels> <fx> <fy> <cx> <cy> <r00> .. <r22> <tx> <ty> <tz>
//! <name> <semantics>                            (one per channel)
//! channel-major planes, row-major within a plane
//! ```
//!
//! Floating-point header fields use the shortest representation that
//! round-trips exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::grid::{GridMap, LayerKind, MapGeometry, VALID};
use crate::sensor::{
    CameraIntrinsics, Channel, ChannelSemantics, MultiModalImage, MultiModalPointCloud, Pose,
};

pub const MAP_MAGIC: &str = "MMEM1";
pub const CLOUD_MAGIC: &str = "MMPC1";
pub const IMAGE_MAGIC: &str = "MMIM1";

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads text lines and then a binary tail from a byte buffer.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn line(&mut self) -> Result<Vec<&'a str>> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        self.pos += end + 1;
        let text = std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        Ok(text.split_ascii_whitespace().collect())
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let rest = &self.bytes[self.pos..];
        if rest.len() < len {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {len}",
                rest.len()
            )));
        }
        self.pos += len;
        Ok(rest[..len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn finish(self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )))
        }
    }
}

fn field<T: std::str::FromStr>(fields: &[&str], i: usize, what: &str) -> Result<T> {
    fields
        .get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad or missing header field `{what}`")))
}

fn expect_magic(fields: &[&str], magic: &str, count: usize) -> Result<()> {
    if fields.first() != Some(&magic) {
        return Err(Error::Format(format!("expected `{magic}` header")));
    }
    if fields.len() != count {
        return Err(Error::Format(format!(
            "`{magic}` header has {} fields, expected {count}",
            fields.len()
        )));
    }
    Ok(())
}

fn name_tag<'a>(reader: &mut Reader<'a>) -> Result<(&'a str, &'a str)> {
    match reader.line()?[..] {
        [name, tag] => Ok((name, tag)),
        _ => Err(Error::Format("expected `<name> <tag>` line".into())),
    }
}

pub fn encode_map(map: &GridMap) -> Vec<u8> {
    let g = map.geometry();
    let mut header = format!(
        "{MAP_MAGIC} {} {} {} {} {} {}\n",
        g.width_cells,
        g.height_cells,
        g.resolution,
        g.center[0],
        g.center[1],
        map.layers().len()
    );
    for layer in map.layers() {
        let _ = writeln!(header, "{} {}", layer.name(), layer.kind().as_str());
    }
    let mut out = header.into_bytes();
    for layer in map.layers() {
        push_f32s(&mut out, layer.values());
    }
    out
}

pub fn decode_map(bytes: &[u8]) -> Result<GridMap> {
    let mut r = Reader::new(bytes);
    let h = r.line()?;
    expect_magic(&h, MAP_MAGIC, 7)?;
    let geometry = MapGeometry::new(
        field(&h, 3, "resolution")?,
        field(&h, 1, "width")?,
        field(&h, 2, "height")?,
        [field(&h, 4, "center_x")?, field(&h, 5, "center_y")?],
    )?;
    let n: usize = field(&h, 6, "layers")?;
    let mut heads = Vec::with_capacity(n);
    for _ in 0..n {
        let (name, kind) = name_tag(&mut r)?;
        let kind = LayerKind::parse(kind).ok_or_else(|| Error::Format(format!("unknown layer kind `{kind}`")))?;
        heads.push((name.to_owned(), kind));
    }
    let mut layers = Vec::with_capacity(n);
    for (name, kind) in heads {
        layers.push((name, kind, r.f32s(geometry.cell_count())?));
    }
    r.finish()?;
    GridMap::from_layers(geometry, layers)
}

pub fn write_map(path: impl AsRef<Path>, map: &GridMap) -> Result<()> {
    Ok(fs::write(path, encode_map(map))?)
}

pub fn read_map(path: impl AsRef<Path>) -> Result<GridMap> {
    decode_map(&fs::read(path)?)
}

pub fn encode_cloud(cloud: &MultiModalPointCloud) -> Vec<u8> {
    let mut header = format!("{CLOUD_MAGIC} {} {}\n", cloud.len(), cloud.channels().len());
    for ch in cloud.channels() {
        let _ = writeln!(header, "{} {}", ch.name, ch.semantics.as_str());
    }
    let mut out = header.into_bytes();
    let mut row = Vec::with_capacity(3 + cloud.channels().len());
    for (i, p) in cloud.points().iter().enumerate() {
        row.clear();
        row.extend_from_slice(p);
        row.extend(cloud.channels().iter().map(|c| c.values[i]));
        push_f32s(&mut out, &row);
    }
    out
}

pub fn decode_cloud(bytes: &[u8]) -> Result<MultiModalPointCloud> {
    let mut r = Reader::new(bytes);
    let h = r.line()?;
    expect_magic(&h, CLOUD_MAGIC, 3)?;
    let n: usize = field(&h, 1, "points")?;
    let c: usize = field(&h, 2, "channels")?;
    let mut heads = Vec::with_capacity(c);
    for _ in 0..c {
        let (name, tag) = name_tag(&mut r)?;
        let semantics = ChannelSemantics::parse(tag)
            .ok_or_else(|| Error::Format(format!("unknown channel semantics `{tag}`")))?;
        heads.push((name.to_owned(), semantics));
    }
    let stride = 3 + c;
    let data = r.f32s(n.checked_mul(stride).ok_or_else(|| Error::Format("size overflows".into()))?)?;
    r.finish()?;
    let points = data.chunks_exact(stride).map(|row| [row[0], row[1], row[2]]).collect();
    let channels = heads
        .into_iter()
        .enumerate()
        .map(|(k, (name, semantics))| {
            Channel::new(name, semantics, data.chunks_exact(stride).map(|row| row[3 + k]).collect())
        })
        .collect();
    MultiModalPointCloud::new(points, channels)
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &MultiModalPointCloud) -> Result<()> {
    Ok(fs::write(path, encode_cloud(cloud))?)
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<MultiModalPointCloud> {
    decode_cloud(&fs::read(path)?)
}

pub fn encode_image(image: &MultiModalImage) -> Vec<u8> {
    let k = image.intrinsics();
    let mut header = format!(
        "{IMAGE_MAGIC} {} {} {} {} {} {} {}",
        k.height,
        k.width,
        image.channels().len(),
        k.fx,
        k.fy,
        k.cx,
        k.cy
    );
    for v in image.pose().to_array() {
        let _ = write!(header, " {v}");
    }
    header.push('\n');
    for ch in image.channels() {
        let _ = writeln!(header, "{} {}", ch.name, ch.semantics.as_str());
    }
    let mut out = header.into_bytes();
    for ch in image.channels() {
        push_f32s(&mut out, &ch.values);
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<MultiModalImage> {
    let mut r = Reader::new(bytes);
    let h = r.line()?;
    expect_magic(&h, IMAGE_MAGIC, 20)?;
    let height: usize = field(&h, 1, "height")?;
    let width: usize = field(&h, 2, "width")?;
    let c: usize = field(&h, 3, "channels")?;
    let intr = CameraIntrinsics::new(
        field(&h, 4, "fx")?,
        field(&h, 5, "fy")?,
        field(&h, 6, "cx")?,
        field(&h, 7, "cy")?,
        width,
        height,
    )?;
    let mut pose = [0.0; 12];
    for (i, v) in pose.iter_mut().enumerate() {
        *v = field(&h, 8 + i, "pose")?;
    }
    let pose = Pose::from_array(pose)?;
    let mut heads = Vec::with_capacity(c);
    for _ in 0..c {
        let (name, tag) = name_tag(&mut r)?;
        let semantics = ChannelSemantics::parse(tag)
            .ok_or_else(|| Error::Format(format!("unknown channel semantics `{tag}`")))?;
        heads.push((name.to_owned(), semantics));
    }
    let mut channels = Vec::with_capacity(c);
    for (name, semantics) in heads {
        channels.push(Channel::new(name, semantics, r.f32s(width * height)?));
    }
    r.finish()?;
    MultiModalImage::new(intr, pose, channels)
}

pub fn write_image(path: impl AsRef<Path>, image: &MultiModalImage) -> Result<()> {
    Ok(fs::write(path, encode_image(image))?)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<MultiModalImage> {
    decode_image(&fs::read(path)?)
}

/// `row,col,value` table in row-major order. Invalid cells and NaN values
/// have an empty value field.
pub fn export_csv(map: &GridMap, layer: &str) -> Result<String> {
    let values = map.values(layer)?;
    let valid = map.values(VALID)?;
    let g = map.geometry();
    let mut out = String::with_capacity(values.len() * 16);
    out.push_str("row,col,value\n");
    for (i, (&v, &ok)) in values.iter().zip(valid).enumerate() {
        let (row, col) = (i / g.width_cells, i % g.width_cells);
        if ok != 0.0 && !v.is_nan() {
            let _ = writeln!(out, "{row},{col},{v}");
        } else {
            let _ = writeln!(out, "{row},{col},");
        }
    }
    Ok(out)
}

/// Parses an [`export_csv`] table back into a layer. Empty fields become NaN.
pub fn import_csv(geometry: &MapGeometry, text: &str) -> Result<Vec<f32>> {
    let mut values = vec![f32::NAN; geometry.cell_count()];
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "row,col,value")) => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "expected header `row,col,value`".into(),
            })
        }
    }
    for (i, line) in lines {
        let bad = |message: &str| Error::Parse {
            line: i + 1,
            message: message.to_owned(),
        };
        let mut parts = line.split(',');
        let (Some(r), Some(c), Some(v), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected three fields"));
        };
        let row: usize = r.parse().map_err(|_| bad("bad row"))?;
        let col: usize = c.parse().map_err(|_| bad("bad col"))?;
        if row >= geometry.height_cells || col >= geometry.width_cells {
            return Err(bad("cell outside the map"));
        }
        if !v.is_empty() {
            values[row * geometry.width_cells + col] = v.parse().map_err(|_| bad("bad value"))?;
        }
    }
    Ok(values)
}

/// Writes a PNG with one pixel per cell, map row `r` as image row `r`.
///
/// A single layer name gives 8-bit grayscale, min-max scaled over valid
/// finite cells (a constant layer maps to mid-gray). Three comma-separated
/// names give RGB with each channel clamped to [0, 1]. Invalid cells are 0.
pub fn export_png(map: &GridMap, layers: &str, path: impl AsRef<Path>) -> Result<()> {
    let g = map.geometry();
    let (w, h) = (g.width_cells as u32, g.height_cells as u32);
    let valid = map.values(VALID)?;
    let names: Vec<&str> = layers.split(',').map(str::trim).collect();
    match names[..] {
        [name] => {
            let values = map.values(name)?;
            let usable = |i: usize| valid[i] != 0.0 && values[i].is_finite();
            let (lo, hi) = (0..values.len())
                .filter(|&i| usable(i))
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), i| (lo.min(values[i]), hi.max(values[i])));
            let img: GrayImage = ImageBuffer::from_fn(w, h, |x, y| {
                let i = y as usize * g.width_cells + x as usize;
                let level = if !usable(i) {
                    0
                } else if hi > lo {
                    (((values[i] - lo) / (hi - lo)) * 255.0).round() as u8
                } else {
                    128
                };
                Luma([level])
            });
            img.save(path)?;
        }
        [r, gr, b] => {
            let channels = [map.values(r)?, map.values(gr)?, map.values(b)?];
            let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w, h, |x, y| {
                let i = y as usize * g.width_cells + x as usize;
                let level = |v: f32| {
                    if valid[i] != 0.0 && v.is_finite() {
                        (v.clamp(0.0, 1.0) * 255.0).round() as u8
                    } else {
                        0
                    }
                };
                Rgb([level(channels[0][i]), level(channels[1][i]), level(channels[2][i])])
            });
            img.save(path)?;
        }
        _ => {
            return Err(Error::InvalidInput(format!(
                "export takes one layer or an `r,g,b` triplet, got `{layers}`"
            )))
        }
    }
    Ok(())
}
