//! Map rasters (8-bit grayscale PNG or binary PGM) with a `key=value`
//! metadata sidecar next to the image (`name.png` → `name.meta`).

use std::fs;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use super::{Cell, GridError, GridMap};
use crate::geometry::WorldPoint;

const FREE: u8 = 255;
const OCCUPIED: u8 = 0;
const UNKNOWN: u8 = 127;

#[derive(Clone, Debug, PartialEq)]
pub struct MapMeta {
    pub resolution: f64,
    pub offset: WorldPoint,
    pub width: usize,
    pub height: usize,
    pub scene_id: String,
}

pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("meta")
}

fn format_err(path: &Path, reason: impl Into<String>) -> GridError {
    GridError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn encode_cell(c: Cell) -> u8 {
    match c {
        Cell::Free => FREE,
        Cell::Occupied => OCCUPIED,
        Cell::Unknown => UNKNOWN,
    }
}

fn decode_cell(v: u8) -> Option<Cell> {
    match v {
        FREE => Some(Cell::Free),
        OCCUPIED => Some(Cell::Occupied),
        UNKNOWN => Some(Cell::Unknown),
        _ => None,
    }
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// Writes `map` as an image (format chosen by extension) plus its sidecar.
pub fn save_map(map: &GridMap, path: &Path, scene_id: &str) -> Result<(), GridError> {
    if scene_id.contains('\n') {
        return Err(GridError::Invalid("scene id may not contain newlines".into()));
    }
    let pixels: Vec<u8> = map.cells().iter().map(|&c| encode_cell(c)).collect();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    if is_pgm(path) {
        let mut out = Vec::with_capacity(pixels.len() + 32);
        write!(out, "P5\n{} {}\n255\n", map.width(), map.height())?;
        out.extend_from_slice(&pixels);
        fs::write(path, out)?;
    } else {
        write_gray_png(path, map.width(), map.height(), &pixels)?;
    }
    let meta = format!(
        "resolution_m={}\noffset_x_m={}\noffset_y_m={}\nwidth={}\nheight={}\nscene_id={}\n",
        map.resolution(),
        map.offset().x,
        map.offset().y,
        map.width(),
        map.height(),
        scene_id
    );
    fs::write(sidecar_path(path), meta)?;
    Ok(())
}

pub(crate) fn write_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), GridError> {
    write_png(path, width, height, pixels, png::ColorType::Grayscale)
}

pub(crate) fn write_rgb_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), GridError> {
    write_png(path, width, height, pixels, png::ColorType::Rgb)
}

fn write_png(path: &Path, width: usize, height: usize, pixels: &[u8], color: png::ColorType) -> Result<(), GridError> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| format_err(path, e.to_string()))?;
    w.write_image_data(pixels)
        .map_err(|e| format_err(path, e.to_string()))?;
    w.finish().map_err(|e| format_err(path, e.to_string()))?;
    Ok(())
}

fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>), GridError> {
    let file = fs::File::open(path)?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(format_err(path, "expected 8-bit single-channel grayscale"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| format_err(path, "image too large"))?
    ];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(path, e.to_string()))?;
    buf.truncate(frame.buffer_size());
    if buf.len() != w * h {
        return Err(format_err(path, "unexpected pixel buffer size"));
    }
    Ok((w, h, buf))
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), GridError> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(&bytes[..]);
    let mut fields = Vec::new();
    // magic, width, height, maxval; '#' comments allowed between fields
    while fields.len() < 4 {
        let mut tok = Vec::new();
        loop {
            let pos = cur.position() as usize;
            let Some(&b) = bytes.get(pos) else {
                return Err(format_err(path, "truncated PGM header"));
            };
            cur.set_position(pos as u64 + 1);
            if b == b'#' && tok.is_empty() {
                while let Some(&c) = bytes.get(cur.position() as usize) {
                    cur.set_position(cur.position() + 1);
                    if c == b'\n' {
                        break;
                    }
                }
                continue;
            }
            if b.is_ascii_whitespace() {
                if tok.is_empty() {
                    continue;
                }
                break;
            }
            tok.push(b);
        }
        fields.push(String::from_utf8_lossy(&tok).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format_err(path, "not a binary PGM (P5)"));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format_err(path, format!("bad PGM header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(format_err(path, "PGM maxval must be 255"));
    }
    let start = cur.position() as usize;
    let data = bytes[start..].to_vec();
    if data.len() != w * h {
        return Err(format_err(
            path,
            format!("expected {} pixels, found {}", w * h, data.len()),
        ));
    }
    Ok((w, h, data))
}

fn parse_meta(path: &Path) -> Result<MapMeta, GridError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => format_err(path, "metadata sidecar not found"),
        _ => GridError::Io(e),
    })?;
    let mut resolution = None;
    let mut ox = None;
    let mut oy = None;
    let mut width = None;
    let mut height = None;
    let mut scene_id = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format_err(path, format!("line {}: expected key=value", n + 1)))?;
        let float = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| format_err(path, format!("line {}: bad number {v:?}", n + 1)))
        };
        let int = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| format_err(path, format!("line {}: bad integer {v:?}", n + 1)))
        };
        match k.trim() {
            "resolution_m" => resolution = Some(float(v)?),
            "offset_x_m" => ox = Some(float(v)?),
            "offset_y_m" => oy = Some(float(v)?),
            "width" => width = Some(int(v)?),
            "height" => height = Some(int(v)?),
            "scene_id" => scene_id = Some(v.to_string()),
            other => return Err(format_err(path, format!("unknown key {other:?}"))),
        }
    }
    let missing = |k: &str| format_err(path, format!("missing key {k}"));
    Ok(MapMeta {
        resolution: resolution.ok_or_else(|| missing("resolution_m"))?,
        offset: WorldPoint::new(
            ox.ok_or_else(|| missing("offset_x_m"))?,
            oy.ok_or_else(|| missing("offset_y_m"))?,
        ),
        width: width.ok_or_else(|| missing("width"))?,
        height: height.ok_or_else(|| missing("height"))?,
        scene_id: scene_id.ok_or_else(|| missing("scene_id"))?,
    })
}

/// Reads a map image and its sidecar. Pixel values other than 0, 127 and
/// 255 are rejected.
pub fn load_map(path: &Path) -> Result<(GridMap, MapMeta), GridError> {
    let meta = parse_meta(&sidecar_path(path))?;
    let (w, h, pixels) = if is_pgm(path) {
        read_pgm(path)?
    } else {
        read_gray_png(path)?
    };
    if (w, h) != (meta.width, meta.height) {
        return Err(format_err(
            path,
            format!("image is {w}x{h} but sidecar says {}x{}", meta.width, meta.height),
        ));
    }
    let cells = pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| decode_cell(v).ok_or_else(|| format_err(path, format!("pixel {i} has value {v}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let map = GridMap::from_cells(w, h, meta.resolution, meta.offset, cells)?;
    Ok((map, meta))
}
