//! File formats: PFM scalar maps, Middlebury `.flo` flow, PNG images, light
//! field grids and dataset manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::lf::{AngularGrid, LightField, CHANNELS};
use crate::warp::FlowField;

const FLO_MAGIC: f32 = 202021.25;

/// Writes `bytes` to a temp file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Single-channel float map as stored in a PFM file (top row first in
/// memory).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Encodes a grayscale little-endian PFM. Rows are written bottom-up as the
/// format prescribes; samples are stored as `f32`.
pub fn encode_pfm(map: &ScalarMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    for y in (0..map.height).rev() {
        for x in 0..map.width {
            out.extend_from_slice(&(map.data[y * map.width + x] as f32).to_le_bytes());
        }
    }
    out
}

/// Decodes a grayscale PFM. A positive scale marks big-endian samples,
/// which are byte-swapped.
pub fn decode_pfm(bytes: &[u8]) -> Result<ScalarMap> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PFM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    match magic.as_str() {
        "Pf" => {}
        "PF" => return Err(Error::Format("color PFM is not supported; expected grayscale Pf".into())),
        other => return Err(Error::Format(format!("bad PFM magic {other:?}"))),
    }
    let parse_dim = |s: String| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::Format(format!("bad PFM dimension {s:?}")))
    };
    let width = parse_dim(token()?)?;
    let height = parse_dim(token()?)?;
    let scale_tok = token()?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::Format(format!("bad PFM scale {scale_tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format("PFM scale must be non-zero".into()));
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("PFM dimensions overflow".into()))?;
    if bytes.len() < pos || bytes.len() - pos != n * 4 {
        return Err(Error::Format(format!(
            "PFM payload has {} bytes, expected {}",
            bytes.len().saturating_sub(pos),
            n * 4
        )));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; n];
    for (i, chunk) in bytes[pos..].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, x) = (i / width, i % width);
        data[(height - 1 - row) * width + x] = v as f64;
    }
    Ok(ScalarMap { height, width, data })
}

pub fn write_pfm(path: &Path, map: &ScalarMap) -> Result<()> {
    write_atomic(path, &encode_pfm(map))
}

pub fn read_pfm(path: &Path) -> Result<ScalarMap> {
    decode_pfm(&read_bytes(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data().len() * 4);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for v in flow.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Format("truncated .flo header".into()));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(Error::Format("bad .flo magic".into()));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!("bad .flo size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + w * h * 8 {
        return Err(Error::Format(format!(
            ".flo payload has {} bytes, expected {}",
            bytes.len() - 12,
            w * h * 8
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FlowField::new(h, w, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    write_atomic(path, &encode_flo(flow))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&read_bytes(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves a 1- or 3-channel image as 8-bit PNG; values are clamped to `[0, 1]`.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = img.dims();
    let bytes: Vec<u8> = img.data().iter().map(|v| quantize(*v)).collect();
    let mut encoded = Vec::new();
    let cursor = std::io::Cursor::new(&mut encoded);
    let encoder = image::codecs::png::PngEncoder::new(cursor);
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Shape(format!("PNG output needs 1 or 3 channels, got {c}"))),
    };
    image::ImageEncoder::write_image(encoder, &bytes, w as u32, h as u32, color)?;
    write_atomic(path, &encoded)
}

/// Loads any PNG as RGB in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Image::new(
        h as usize,
        w as usize,
        CHANNELS,
        rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
    )
}

/// Saves a light field as one PNG mosaic: tile row `i` holds `u = i − radius`,
/// tile column `j` holds `v = j − radius`.
pub fn save_lf_grid(lf: &LightField, path: &Path) -> Result<()> {
    let grid = lf.grid();
    let (h, w) = (lf.height(), lf.width());
    let (rows, cols) = (grid.u_count(), grid.v_count());
    let mut buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new((cols * w) as u32, (rows * h) as u32);
    for i in 0..rows {
        for j in 0..cols {
            let u = i as i64 - grid.u_radius();
            let v = j as i64 - grid.v_radius();
            let view = lf.view_slice(grid.index_of(u, v)?);
            for y in 0..h {
                for x in 0..w {
                    let p = (y * w + x) * CHANNELS;
                    buf.put_pixel(
                        (j * w + x) as u32,
                        (i * h + y) as u32,
                        Rgb([quantize(view[p]), quantize(view[p + 1]), quantize(view[p + 2])]),
                    );
                }
            }
        }
    }
    let img = Image::new(rows * h, cols * w, CHANNELS, buf.into_raw().into_iter().map(|b| b as f64 / 255.0).collect())?;
    save_png(&img, path)
}

/// Splits a mosaic PNG into the views of `grid`.
pub fn load_lf_grid(path: &Path, grid: AngularGrid) -> Result<LightField> {
    let mosaic = load_png(path)?;
    split_mosaic(&mosaic, grid)
}

pub(crate) fn split_mosaic(mosaic: &Image, grid: AngularGrid) -> Result<LightField> {
    let (rows, cols) = (grid.u_count(), grid.v_count());
    let (mh, mw) = (mosaic.height(), mosaic.width());
    if mh % rows != 0 || mw % cols != 0 {
        return Err(Error::Format(format!(
            "{mw}x{mh} mosaic does not split into {rows}x{cols} tiles"
        )));
    }
    let (h, w) = (mh / rows, mw / cols);
    let mut views = vec![Image::zeros(h, w, CHANNELS); grid.len()];
    for i in 0..rows {
        for j in 0..cols {
            let idx = grid.index_of(i as i64 - grid.u_radius(), j as i64 - grid.v_radius())?;
            views[idx] = Image::from_fn(h, w, CHANNELS, |y, x, c| mosaic.get(i * h + y, j * w + x, c));
        }
    }
    LightField::from_views(grid, &views)
}

pub fn view_file_name(u: i64, v: i64) -> String {
    format!("view_{u:+}_{v:+}.png")
}

/// Directory form: one `view_{u:+d}_{v:+d}.png` per view.
pub fn save_lf_dir(lf: &LightField, dir: &Path) -> Result<()> {
    for (idx, (u, v)) in lf.grid().offsets().enumerate() {
        save_png(&lf.view_by_index(idx), &dir.join(view_file_name(u, v)))?;
    }
    Ok(())
}

pub fn load_lf_dir(dir: &Path, grid: AngularGrid) -> Result<LightField> {
    let views = grid
        .offsets()
        .map(|(u, v)| load_png(&dir.join(view_file_name(u, v))))
        .collect::<Result<Vec<_>>>()?;
    LightField::from_views(grid, &views)
}

/// Loads a light field from a mosaic PNG or a view directory.
pub fn load_lf(path: &Path, grid: AngularGrid) -> Result<LightField> {
    if path.is_dir() {
        load_lf_dir(path, grid)
    } else {
        load_lf_grid(path, grid)
    }
}

/// Saves a single-channel map as grayscale PNG after min-max normalization.
pub fn save_normalized_png(height: usize, width: usize, data: &[f64], path: &Path) -> Result<()> {
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::new(width as u32, height as u32);
    for (i, v) in data.iter().enumerate() {
        buf.put_pixel((i % width) as u32, (i / width) as u32, Luma([quantize((v - lo) / span)]));
    }
    let img = Image::new(height, width, 1, buf.into_raw().into_iter().map(|b| b as f64 / 255.0).collect())?;
    save_png(&img, path)
}

/// One manifest line: `lf_path,T,seed`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub lf_path: PathBuf,
    pub frames: usize,
    pub seed: u64,
}

/// Parses a manifest; relative paths resolve against the manifest's
/// directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if rec.len() != 3 {
            return Err(Error::Format(format!(
                "manifest record {} needs lf_path,T,seed; got {} fields",
                line + 1,
                rec.len()
            )));
        }
        let frames = rec[1]
            .parse()
            .map_err(|_| Error::Format(format!("manifest record {}: bad frame count {:?}", line + 1, &rec[1])))?;
        let seed = rec[2]
            .parse()
            .map_err(|_| Error::Format(format!("manifest record {}: bad seed {:?}", line + 1, &rec[2])))?;
        let p = PathBuf::from(&rec[0]);
        out.push(ManifestEntry {
            lf_path: if p.is_absolute() { p } else { base.join(p) },
            frames,
            seed,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = ScalarMap {
            height: 5,
            width: 7,
            data: (0..35).map(|_| rng.gen_range(-3.0f32..3.0) as f64).collect(),
        };
        let bytes = encode_pfm(&map);
        let back = decode_pfm(&bytes).unwrap();
        assert_eq!(back, map);
        assert_eq!(encode_pfm(&back), bytes);
    }

    #[test]
    fn big_endian_pfm_is_byte_swapped() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-0.25f32).to_be_bytes());
        let map = decode_pfm(&bytes).unwrap();
        assert_eq!(map.data, vec![1.5, -0.25]);
    }

    #[test]
    fn pfm_rows_are_stored_bottom_up() {
        let map = ScalarMap { height: 2, width: 1, data: vec![1.0, 2.0] };
        let bytes = encode_pfm(&map);
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(&payload[..4], &2.0f32.to_le_bytes());
    }

    #[test]
    fn malformed_pfm_is_rejected() {
        assert!(decode_pfm(b"P6\n1 1\n-1.0\n\0\0\0\0").is_err());
        assert!(decode_pfm(b"Pf\n2 2\n-1.0\n\0\0\0\0").is_err());
        assert!(decode_pfm(b"PF\n1 1\n-1.0\n").is_err());
        assert!(decode_pfm(b"Pf\n1").is_err());
    }

    #[test]
    fn flo_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = (0..4 * 6 * 2).map(|_| rng.gen_range(-5.0f32..5.0) as f64).collect();
        let flow = FlowField::new(4, 6, data).unwrap();
        let bytes = encode_flo(&flow);
        assert_eq!(&bytes[..4], &202021.25f32.to_le_bytes());
        assert_eq!(decode_flo(&bytes).unwrap(), flow);
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(decode_flo(&bad).is_err());
        assert!(decode_flo(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn lf_grid_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let grid = AngularGrid::new(3, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lf = LightField::new(grid, 4, 6, (0..15 * 4 * 6 * 3).map(|_| rng.gen()).collect()).unwrap();
        let path = dir.path().join("lf.png");
        save_lf_grid(&lf, &path).unwrap();
        let back = load_lf_grid(&path, grid).unwrap();
        let err = lf.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1.0 / 255.0, "{err}");
        assert!(load_lf_grid(&path, AngularGrid::square(7).unwrap()).is_err());

        let vdir = dir.path().join("views");
        save_lf_dir(&lf, &vdir).unwrap();
        assert!(vdir.join("view_-1_+2.png").exists());
        assert_eq!(load_lf_dir(&vdir, grid).unwrap(), back);
    }

    #[test]
    fn mosaic_layout_is_u_by_rows() {
        let grid = AngularGrid::square(7).unwrap();
        let mosaic = Image::from_fn(448, 448, 3, |y, x, _| ((y / 64) * 7 + x / 64) as f64 / 48.0);
        let lf = split_mosaic(&mosaic, grid).unwrap();
        assert_eq!((lf.height(), lf.width()), (64, 64));
        let v = lf.view(-3, 2).unwrap();
        assert!((v.get(0, 0, 0) - 5.0 / 48.0).abs() < 1e-12);
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_flo(&dir.path().join("nope.flo")), Err(Error::MissingFile(_))));
        assert!(matches!(load_png(&dir.path().join("nope.png")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn manifest_parsing() {
        let text = "# comment\na/lf.png, 8, 3\n\n/abs/x, 4 ,1\n";
        let m = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].lf_path, PathBuf::from("/data/a/lf.png"));
        assert_eq!((m[0].frames, m[0].seed), (8, 3));
        assert_eq!(m[1].lf_path, PathBuf::from("/abs/x"));
        assert!(parse_manifest("x,1\n", Path::new(".")).is_err());
        assert!(parse_manifest("x,one,2\n", Path::new(".")).is_err());
    }
}
