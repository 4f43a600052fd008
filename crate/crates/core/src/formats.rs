//! On-disk channel and mesh formats.
//!
//! Depth is 16-bit binary PGM in millimeters (0 = invalid), masks are 8-bit
//! PGM with values 0/255, RGB is binary PPM. Object coordinates use a small
//! binary container: an 8-byte magic, little-endian `u32` width and height,
//! row-major `f32` triples in mm, then one validity bit per pixel (LSB
//! first). Meshes are read from ASCII PLY or OBJ and written as ASCII PLY.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{
    DepthImage, InstanceMask, ObjectCoordinateImage, ObjectModel, RgbImage, Vec3,
};

pub const OC_MAGIC: &[u8; 8] = b"P6DOC\x01\0\0";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct Pnm<'a> {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    body: &'a [u8],
}

fn parse_pnm<'a>(bytes: &'a [u8], ctx: &str) -> Result<Pnm<'a>> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::parse(ctx, "not a PNM file"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::parse(ctx, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(ctx, "bad header number"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::parse(ctx, "missing header terminator"));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(ctx, format!("bad maxval {maxval}")));
    }
    Ok(Pnm {
        magic,
        width: width as usize,
        height: height as usize,
        maxval,
        body: &bytes[pos + 1..],
    })
}

impl Pnm<'_> {
    fn samples(&self, channels: usize, ctx: &str) -> Result<Vec<u16>> {
        let n = self.width * self.height * channels;
        let wide = self.maxval > 255;
        let need = if wide { 2 * n } else { n };
        if self.body.len() < need {
            return Err(Error::parse(ctx, "truncated pixel data"));
        }
        Ok(if wide {
            self.body[..need]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        } else {
            self.body[..n].iter().map(|b| *b as u16).collect()
        })
    }
}

fn pnm_header(magic: &str, w: usize, h: usize, maxval: u32) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes()
}

/// Depth values are rounded to whole millimeters and clamped to 16 bits.
pub fn encode_depth(depth: &DepthImage) -> Vec<u8> {
    let mut out = pnm_header("P5", depth.width(), depth.height(), 65535);
    for z in depth.data() {
        let mm = z.round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&mm.to_be_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8], ctx: &str) -> Result<DepthImage> {
    let pnm = parse_pnm(bytes, ctx)?;
    if &pnm.magic != b"P5" {
        return Err(Error::parse(ctx, "depth must be a binary PGM"));
    }
    let data = pnm.samples(1, ctx)?.into_iter().map(|s| s as f64).collect();
    DepthImage::from_data(pnm.width, pnm.height, data)
}

pub fn encode_mask(mask: &InstanceMask) -> Vec<u8> {
    let mut out = pnm_header("P5", mask.width(), mask.height(), 255);
    out.extend(mask.data().iter().map(|on| if *on { 255u8 } else { 0 }));
    out
}

/// Any non-zero sample is inside the mask.
pub fn decode_mask(bytes: &[u8], class_id: u32, ctx: &str) -> Result<InstanceMask> {
    let pnm = parse_pnm(bytes, ctx)?;
    if &pnm.magic != b"P5" {
        return Err(Error::parse(ctx, "mask must be a binary PGM"));
    }
    let data = pnm.samples(1, ctx)?.into_iter().map(|s| s != 0).collect();
    InstanceMask::from_data(pnm.width, pnm.height, data, class_id)
}

pub fn encode_rgb(img: &RgbImage) -> Vec<u8> {
    let mut out = pnm_header("P6", img.width(), img.height(), 255);
    for px in img.data() {
        out.extend_from_slice(px);
    }
    out
}

pub fn decode_rgb(bytes: &[u8], ctx: &str) -> Result<RgbImage> {
    let pnm = parse_pnm(bytes, ctx)?;
    if &pnm.magic != b"P6" || pnm.maxval > 255 {
        return Err(Error::parse(ctx, "rgb must be an 8-bit binary PPM"));
    }
    let s = pnm.samples(3, ctx)?;
    let data = s
        .chunks_exact(3)
        .map(|c| [c[0] as u8, c[1] as u8, c[2] as u8])
        .collect();
    RgbImage::from_data(pnm.width, pnm.height, data)
}

/// Coordinates are stored as `f32`; invalid pixels store zeros.
pub fn encode_object_coords(oc: &ObjectCoordinateImage) -> Vec<u8> {
    let (w, h) = (oc.width(), oc.height());
    let mut out = Vec::with_capacity(16 + 12 * w * h + (w * h).div_ceil(8));
    out.extend_from_slice(OC_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    let mut bits = vec![0u8; (w * h).div_ceil(8)];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let c = oc.get(u, v);
            if c.is_some() {
                bits[i / 8] |= 1 << (i % 8);
            }
            let c = c.unwrap_or_else(Vec3::zeros);
            for x in c.iter() {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&bits);
    out
}

pub fn decode_object_coords(bytes: &[u8], ctx: &str) -> Result<ObjectCoordinateImage> {
    if bytes.len() < 16 || &bytes[..8] != OC_MAGIC {
        return Err(Error::parse(ctx, "bad object-coordinate magic"));
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let n = w * h;
    let body = &bytes[16..];
    if body.len() != 12 * n + n.div_ceil(8) {
        return Err(Error::parse(
            ctx,
            "object-coordinate size does not match dimensions",
        ));
    }
    let (vals, bits) = body.split_at(12 * n);
    let mut oc = ObjectCoordinateImage::new(w, h);
    let f =
        |k: usize| f32::from_le_bytes(vals[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
    for i in 0..n {
        if bits[i / 8] & (1 << (i % 8)) != 0 {
            oc.set(
                i % w,
                i / w,
                Vec3::new(f(3 * i), f(3 * i + 1), f(3 * i + 2)),
            );
        }
    }
    Ok(oc)
}

pub fn encode_ply(model: &ObjectModel) -> Vec<u8> {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", model.vertices().len()));
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    s.push_str(&format!("element face {}\n", model.triangles().len()));
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for v in model.vertices() {
        s.push_str(&format!("{} {} {}\n", v.x, v.y, v.z));
    }
    for t in model.triangles() {
        s.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
    }
    s.into_bytes()
}

/// ASCII PLY with `x y z` vertex properties and polygon faces (fanned into
/// triangles).
pub fn decode_ply(bytes: &[u8], class_id: u32, ctx: &str) -> Result<ObjectModel> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::parse(ctx, "PLY is not ASCII"))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::parse(ctx, "missing ply magic"));
    }
    let mut n_vert = 0usize;
    let mut n_face = 0usize;
    let mut vprops: Vec<String> = Vec::new();
    let mut current = "";
    for line in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(Error::parse(ctx, format!("unsupported PLY format {fmt}")));
            }
            ["element", "vertex", n] => {
                n_vert = n
                    .parse()
                    .map_err(|_| Error::parse(ctx, "bad vertex count"))?;
                current = "vertex";
            }
            ["element", "face", n] => {
                n_face = n.parse().map_err(|_| Error::parse(ctx, "bad face count"))?;
                current = "face";
            }
            ["element", ..] => current = "other",
            ["property", .., name] if current == "vertex" => vprops.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let idx = |name: &str| {
        vprops
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::parse(ctx, format!("PLY vertex lacks property {name}")))
    };
    let (ix, iy, iz) = (idx("x")?, idx("y")?, idx("z")?);
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::parse(ctx, format!("bad number {s}")))
    };
    let mut vertices = Vec::with_capacity(n_vert);
    for _ in 0..n_vert {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(ctx, "truncated vertex list"))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < vprops.len() {
            return Err(Error::parse(ctx, "short vertex line"));
        }
        vertices.push(Vec3::new(num(tok[ix])?, num(tok[iy])?, num(tok[iz])?));
    }
    let mut triangles = Vec::with_capacity(n_face);
    for _ in 0..n_face {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(ctx, "truncated face list"))?;
        let ids: Vec<u32> = line
            .split_whitespace()
            .map(|s| {
                s.parse::<u32>()
                    .map_err(|_| Error::parse(ctx, format!("bad index {s}")))
            })
            .collect::<Result<_>>()?;
        let (&k, rest) = ids
            .split_first()
            .ok_or_else(|| Error::parse(ctx, "empty face"))?;
        if k < 3 || rest.len() < k as usize {
            return Err(Error::parse(ctx, "bad face arity"));
        }
        for i in 1..k as usize - 1 {
            triangles.push([rest[0], rest[i], rest[i + 1]]);
        }
    }
    ObjectModel::new(class_id, vertices, triangles)
}

/// Wavefront OBJ `v` and `f` records; texture and normal indices are
/// ignored and negative indices count from the end.
pub fn decode_obj(bytes: &[u8], class_id: u32, ctx: &str) -> Result<ObjectModel> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::parse(ctx, "OBJ is not text"))?;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for line in text.lines() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let c: Vec<f64> = tok
                    .take(3)
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| Error::parse(ctx, format!("bad number {s}")))
                    })
                    .collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(Error::parse(ctx, "short vertex"));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let n = vertices.len() as i64;
                let ids: Vec<u32> = tok
                    .map(|s| {
                        let i: i64 = s
                            .split('/')
                            .next()
                            .and_then(|x| x.parse().ok())
                            .ok_or_else(|| Error::parse(ctx, format!("bad face index {s}")))?;
                        let i = if i < 0 { n + i } else { i - 1 };
                        u32::try_from(i)
                            .map_err(|_| Error::parse(ctx, format!("face index {s} out of range")))
                    })
                    .collect::<Result<_>>()?;
                if ids.len() < 3 {
                    return Err(Error::parse(ctx, "face with fewer than 3 vertices"));
                }
                for i in 1..ids.len() - 1 {
                    triangles.push([ids[0], ids[i], ids[i + 1]]);
                }
            }
            _ => {}
        }
    }
    ObjectModel::new(class_id, vertices, triangles)
}

/// Reads a mesh by extension (`.ply` or `.obj`).
pub fn read_mesh(path: &Path, class_id: u32) -> Result<ObjectModel> {
    let bytes = read_file(path)?;
    let ctx = path.display().to_string();
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("ply") => decode_ply(&bytes, class_id, &ctx),
        Some("obj") => decode_obj(&bytes, class_id, &ctx),
        _ => Err(Error::parse(ctx, "unknown mesh extension")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshes;

    #[test]
    fn depth_round_trip() {
        let mut d = DepthImage::new(5, 3);
        d.set(0, 0, 812.0);
        d.set(4, 2, 65535.0);
        d.set(2, 1, 1234.4);
        let bytes = encode_depth(&d);
        let back = decode_depth(&bytes, "t").unwrap();
        assert_eq!(back.get(0, 0), 812.0);
        assert_eq!(back.get(2, 1), 1234.0);
        assert_eq!(back.get(1, 1), 0.0);
        assert_eq!(encode_depth(&back), bytes);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let m = decode_mask(&bytes, 3, "t").unwrap();
        assert!(!m.get(0, 0) && m.get(1, 0));
        assert_eq!(m.class_id(), 3);
    }

    #[test]
    fn object_coords_round_trip() {
        let mut oc = ObjectCoordinateImage::new(3, 3);
        oc.set(0, 0, Vec3::new(1.5, -2.25, 3.0));
        oc.set(2, 2, Vec3::new(0.0, 0.0, 0.0));
        let bytes = encode_object_coords(&oc);
        let back = decode_object_coords(&bytes, "t").unwrap();
        assert_eq!(back, oc);
        assert!(back.is_valid(2, 2) && !back.is_valid(1, 1));
        assert_eq!(encode_object_coords(&back), bytes);
        assert!(decode_object_coords(&bytes[..bytes.len() - 1], "t").is_err());
    }

    #[test]
    fn ply_round_trip_is_exact() {
        let m = meshes::blob(4, 50.0, 9, 6, 10);
        let back = decode_ply(&encode_ply(&m), 4, "t").unwrap();
        assert_eq!(back.vertices(), m.vertices());
        assert_eq!(back.triangles(), m.triangles());
    }

    #[test]
    fn obj_quads_are_fanned() {
        let text =
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 0 1\nf 1/1 2/2 3/3 4/4\nf 1 2 5\nf -1 -2 -3\n";
        let m = decode_obj(text.as_bytes(), 1, "t").unwrap();
        assert_eq!(m.triangles(), &[[0, 1, 2], [0, 2, 3], [0, 1, 4], [4, 3, 2]]);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
