//! Binary netpbm codecs: PGM (P5) for masks and saliency maps, PPM (P6) for
//! images. 8-bit samples only; values map linearly to [0, 1] tensors.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn decode_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Decode {
        path: path.display().to_string(),
        message: message.into(),
    }
}

struct Header {
    magic: u8, // 5 or 6
    width: usize,
    height: usize,
    maxval: u16,
    payload_start: usize,
}

/// Parse "P5"/"P6", then width, height, maxval as ASCII separated by
/// whitespace, with `#` comments; a single whitespace byte ends the header.
fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' || (bytes[1] != b'5' && bytes[1] != b'6') {
        return Err(decode_err(path, "bad magic, expected P5 or P6"));
    }
    let magic = bytes[1] - b'0';
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(decode_err(path, "truncated header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text
            .parse()
            .map_err(|_| decode_err(path, "header field out of range"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(decode_err(path, "missing whitespace after maxval"));
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if width == 0 || height == 0 {
        return Err(decode_err(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(decode_err(
            path,
            format!("unsupported maxval {} (8-bit only)", maxval),
        ));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval: maxval as u16,
        payload_start: pos,
    })
}

/// Read a raster file. P5 produces a `[H,W]` tensor, P6 a `[3,H,W]` tensor,
/// with values scaled to [0, 1].
pub fn read_raster(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let h = parse_header(path, &bytes)?;
    let channels = if h.magic == 5 { 1 } else { 3 };
    let expected = h.width * h.height * channels;
    let payload = &bytes[h.payload_start..];
    if payload.len() != expected {
        return Err(decode_err(
            path,
            format!("payload has {} bytes, expected {}", payload.len(), expected),
        ));
    }
    let scale = 1.0 / f64::from(h.maxval);
    if h.magic == 5 {
        let data = payload.iter().map(|b| f64::from(*b) * scale).collect();
        Tensor::from_vec(&[h.height, h.width], data)
    } else {
        // Interleaved RGB to channel planes.
        let mut data = vec![0.0; expected];
        let hw = h.width * h.height;
        for i in 0..hw {
            for c in 0..3 {
                data[c * hw + i] = f64::from(payload[3 * i + c]) * scale;
            }
        }
        Tensor::from_vec(&[3, h.height, h.width], data)
    }
}

/// Read a P5 grayscale file as `[H,W]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let t = read_raster(path)?;
    if t.rank() != 2 {
        return Err(decode_err(path, "expected a P5 grayscale file"));
    }
    Ok(t)
}

/// Read a P6 color file as `[3,H,W]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let t = read_raster(path)?;
    if t.rank() != 3 {
        return Err(decode_err(path, "expected a P6 color file"));
    }
    Ok(t)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a raster file; `[H,W]` or `[1,H,W]` tensors become P5, `[3,H,W]`
/// becomes P6. Values are clamped to [0, 1] and quantized to 8 bits.
pub fn write_raster(path: &Path, t: &Tensor) -> Result<()> {
    let shape = t.shape();
    let as_gray = match shape {
        [_, _] => Some((shape[0], shape[1])),
        [1, h, w] => Some((*h, *w)),
        _ => None,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some((h, w)) = as_gray {
        write!(out, "P5\n{} {}\n255\n", w, h)?;
        let bytes: Vec<u8> = t.data().iter().map(|v| quantize(*v)).collect();
        out.write_all(&bytes)?;
    } else if shape.len() == 3 && shape[0] == 3 {
        let (h, w) = (shape[1], shape[2]);
        write!(out, "P6\n{} {}\n255\n", w, h)?;
        let data = t.data();
        let hw = h * w;
        let mut bytes = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            for c in 0..3 {
                bytes.push(quantize(data[c * hw + i]));
            }
        }
        out.write_all(&bytes)?;
    } else {
        return Err(Error::Shape {
            op: "write_raster",
            detail: format!("cannot encode shape {:?} as PGM/PPM", shape),
        });
    }
    out.flush()?;
    Ok(())
}
