//! PFM depth maps, 8-bit PGM images and scene directories.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};

use super::{Image, Scene};
use crate::error::{Error, Result};
use crate::geometry::{format_cameras, parse_cameras};
use crate::network::DepthMap;

pub const DEPTH_FILE: &str = "depth.pfm";
pub const CAMERAS_FILE: &str = "cameras.txt";

fn view_file(k: usize) -> String {
    format!("view_{k}.pgm")
}

/// Grayscale little-endian PFM (`Pf`, scale -1). Rows are stored bottom to
/// top; invalid pixels are written as 0. Values are narrowed to `f32`.
pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    out.reserve(depth.width * depth.height * 4);
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            let i = y * depth.width + x;
            let v = if depth.valid[i] { depth.depth[i] as f32 } else { 0.0 };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            what: "PFM",
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_whitespace(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self) -> Result<&str> {
        self.skip_whitespace();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Parse {
            what: "PFM",
            offset: start,
            msg: "header is not ASCII".into(),
        })
    }

    fn number<T: std::str::FromStr>(&mut self, name: &str) -> Result<(usize, T)> {
        self.skip_whitespace();
        let start = self.pos;
        let tok = self.token()?.to_string();
        tok.parse().map(|v| (start, v)).map_err(|_| Error::Parse {
            what: "PFM",
            offset: start,
            msg: format!("bad {name} `{tok}`"),
        })
    }
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap> {
    let mut h = Header { bytes, pos: 0 };
    match h.token()? {
        "Pf" => {}
        "PF" => return Err(Error::Parse { what: "PFM", offset: 0, msg: "colour PFM is not supported".into() }),
        other => {
            let msg = format!("expected `Pf`, found `{other}`");
            return Err(Error::Parse { what: "PFM", offset: 0, msg });
        }
    }
    let (_, width): (_, usize) = h.number("width")?;
    let (_, height): (_, usize) = h.number("height")?;
    let (scale_at, scale): (_, f64) = h.number("scale")?;
    if width == 0 || height == 0 {
        return Err(h.err("zero image size"));
    }
    if scale >= 0.0 {
        return Err(Error::Parse {
            what: "PFM",
            offset: scale_at,
            msg: format!("big-endian PFM (scale {scale}) is not supported"),
        });
    }
    // exactly one whitespace byte separates the header from the payload
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(h.err("missing separator after scale"));
    }
    let start = h.pos + 1;
    let need = width * height * 4;
    if bytes.len() - start != need {
        return Err(Error::Parse {
            what: "PFM",
            offset: start,
            msg: format!("expected {need} payload bytes, found {}", bytes.len() - start),
        });
    }
    let mut depth = vec![0.0; width * height];
    for (row, chunk) in bytes[start..].chunks_exact(width * 4).enumerate() {
        let y = height - 1 - row;
        for (x, b) in chunk.chunks_exact(4).enumerate() {
            depth[y * width + x] = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
    }
    DepthMap::from_values(width, height, depth)
}

pub fn save_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    fs::write(path, encode_pfm(depth)).map_err(|e| Error::io(path, e))
}

pub fn load_depth(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes)
}

/// Write an 8-bit binary PGM.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, img.width as u32, img.height as u32, ExtendedColorType::L8)?;
    Ok(())
}

/// Read any image the decoder understands as 8-bit grayscale in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?
        .to_luma8();
    let (w, h) = decoded.dimensions();
    Image::new(
        w as usize,
        h as usize,
        decoded.into_raw().into_iter().map(|p| p as f64 / 255.0).collect(),
    )
}

/// `view_<k>.pgm` for every view, `depth.pfm` and `cameras.txt`.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, img) in scene.images.iter().enumerate() {
        save_image(&dir.join(view_file(k)), img)?;
    }
    save_depth(&dir.join(DEPTH_FILE), &scene.depth)?;
    let cams = dir.join(CAMERAS_FILE);
    fs::write(&cams, format_cameras(&scene.cameras)).map_err(|e| Error::io(&cams, e))
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    let cams = dir.join(CAMERAS_FILE);
    let text = fs::read_to_string(&cams).map_err(|e| Error::io(&cams, e))?;
    let cameras = parse_cameras(&text)?;
    if cameras.len() < 2 {
        return Err(Error::invalid(format!(
            "{} lists {} cameras; a scene needs a reference and at least one paired view",
            cams.display(),
            cameras.len()
        )));
    }
    let images = (0..cameras.len())
        .map(|k| load_image(&dir.join(view_file(k))))
        .collect::<Result<Vec<_>>>()?;
    let depth = load_depth(&dir.join(DEPTH_FILE))?;
    for (k, (img, cam)) in images.iter().zip(&cameras).enumerate() {
        let c = &cam.intrinsics;
        if (img.width, img.height) != (c.width, c.height) || (img.width, img.height) != (depth.width, depth.height) {
            return Err(Error::invalid(format!(
                "view {k} is {}x{} but its camera says {}x{} and the depth map is {}x{}",
                img.width, img.height, c.width, c.height, depth.width, depth.height
            )));
        }
    }
    Ok(Scene { images, depth, cameras })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, Layout, SceneSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pfm_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w, h) = (7, 5);
        let mut depth = Vec::new();
        let mut valid = Vec::new();
        for _ in 0..w * h {
            let ok = rng.random_bool(0.8);
            valid.push(ok);
            depth.push(if ok { rng.random_range(0.1f32..50.0) as f64 } else { 0.0 });
        }
        let map = DepthMap::new(w, h, depth, valid).unwrap();
        assert_eq!(decode_pfm(&encode_pfm(&map)).unwrap(), map);
    }

    #[test]
    fn minimal_header() {
        let mut bytes = b"Pf\n2 2\n-1.0\n".to_vec();
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let map = decode_pfm(&bytes).unwrap();
        assert_eq!((map.width, map.height), (2, 2));
        // the first stored row is the bottom one
        assert_eq!(map.depth, vec![3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn big_endian_rejected() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_be_bytes());
        let err = decode_pfm(&bytes).unwrap_err();
        assert!(err.to_string().contains("big-endian"), "{err}");
        assert!(matches!(err, Error::Parse { offset: 7, .. }));
    }

    #[test]
    fn malformed_headers_report_offsets() {
        assert!(matches!(decode_pfm(b"P6\n1 1\n-1.0\n"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode_pfm(b"Pf\nx 1\n-1.0\n"), Err(Error::Parse { offset: 3, .. })));
        let short = decode_pfm(b"Pf\n1 1\n-1.0\n\0\0").unwrap_err();
        assert!(matches!(short, Error::Parse { offset: 12, .. }), "{short}");
    }

    #[test]
    fn scene_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            paired_views: 3,
            ..SceneSpec::toy(Layout::TexturedPlanes)
        };
        let scene = generate_scene(&spec, 7).unwrap().scene;
        write_scene(dir.path(), &scene).unwrap();
        let mut names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(
            names,
            ["cameras.txt", "depth.pfm", "view_0.pgm", "view_1.pgm", "view_2.pgm", "view_3.pgm"]
        );
        let back = read_scene(dir.path()).unwrap();
        assert_eq!(back.cameras, scene.cameras);
        for (a, b) in back.images.iter().zip(&scene.images) {
            assert_eq!(a, &b.quantized());
        }
        for (a, b) in back.depth.depth.iter().zip(&scene.depth.depth) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
