//! On-disk sample cache: a plain-text manifest followed by the raw arrays
//! as little-endian `f32`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use super::{SceneObject, SceneSample, Shape};
use crate::error::{Error, Result};
use crate::image::Image;

pub const CACHE_VERSION: u32 = 1;
const MAGIC: &str = "fusejepa-scene";

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `sample` to `dir/scene_<seed>.bin` and returns the path.
pub fn save_sample(dir: &Path, sample: &SceneSample) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("scene_{}.bin", sample.seed));
    let seg: Vec<f32> = sample.seg.iter().map(|&c| c as f32).collect();
    let arrays: [(&str, usize, &[f32]); 5] = [
        ("rgb", 3, &sample.rgb.data),
        ("depth_dense", 1, &sample.depth_dense.data),
        ("depth_sparse", 1, &sample.depth_sparse.data),
        ("companion", 1, &sample.companion.data),
        ("seg", 1, &seg),
    ];
    let mut header = format!(
        "{MAGIC} {CACHE_VERSION}\nseed {}\nsize {}\ndtype f32le\n",
        sample.seed, sample.size
    );
    for (name, ch, _) in &arrays {
        header.push_str(&format!("array {name} {} {} {ch}\n", sample.size, sample.size));
    }
    for o in &sample.objects {
        let shape = match o.shape {
            Shape::Box => "box",
            Shape::Disk => "disk",
        };
        header.push_str(&format!(
            "object {shape} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}\n",
            o.center.0, o.center.1, o.extent.0, o.extent.1, o.depth, o.color[0], o.color[1], o.color[2]
        ));
    }
    header.push_str("end\n");
    let mut f = fs::File::create(&path)?;
    f.write_all(header.as_bytes())?;
    for (_, _, data) in &arrays {
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        f.write_all(&bytes)?;
    }
    Ok(path)
}

fn parse<T: std::str::FromStr>(path: &Path, tok: Option<&str>) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| bad(path, "malformed manifest line"))
}

pub fn load_sample(path: &Path) -> Result<SceneSample> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != format!("{MAGIC} {CACHE_VERSION}") {
        return Err(bad(path, format!("unsupported header `{}`", line.trim_end())));
    }
    let (mut seed, mut size) = (None, None);
    let mut arrays: Vec<(String, usize)> = Vec::new();
    let mut objects = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad(path, "manifest not terminated"));
        }
        let mut it = line.split_whitespace();
        match it.next() {
            Some("end") => break,
            Some("seed") => seed = Some(parse::<u64>(path, it.next())?),
            Some("size") => size = Some(parse::<usize>(path, it.next())?),
            Some("dtype") => {
                if it.next() != Some("f32le") {
                    return Err(bad(path, "unsupported dtype"));
                }
            }
            Some("array") => {
                let name = it.next().ok_or_else(|| bad(path, "array name"))?.to_string();
                let h: usize = parse(path, it.next())?;
                let w: usize = parse(path, it.next())?;
                let c: usize = parse(path, it.next())?;
                arrays.push((name, h * w * c));
            }
            Some("object") => {
                let shape = match it.next() {
                    Some("box") => Shape::Box,
                    Some("disk") => Shape::Disk,
                    _ => return Err(bad(path, "unknown object shape")),
                };
                let mut f = [0.0f64; 5];
                for v in &mut f {
                    *v = parse(path, it.next())?;
                }
                let mut color = [0.0f32; 3];
                for v in &mut color {
                    *v = parse(path, it.next())?;
                }
                objects.push(SceneObject {
                    shape,
                    center: (f[0], f[1]),
                    extent: (f[2], f[3]),
                    depth: f[4],
                    color,
                });
            }
            _ => return Err(bad(path, format!("unexpected manifest line `{}`", line.trim_end()))),
        }
    }
    let seed = seed.ok_or_else(|| bad(path, "missing seed"))?;
    let size = size.ok_or_else(|| bad(path, "missing size"))?;
    let mut take = |name: &str| -> Result<Vec<f32>> {
        let &(_, len) = arrays
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| bad(path, format!("missing array {name}")))?;
        let mut buf = vec![0u8; len * 4];
        r.read_exact(&mut buf)
            .map_err(|_| bad(path, format!("truncated array {name}")))?;
        Ok(buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };
    let rgb = take("rgb")?;
    let dense = take("depth_dense")?;
    let sparse = take("depth_sparse")?;
    let companion = take("companion")?;
    let seg = take("seg")?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(path, "trailing bytes after arrays"));
    }
    Ok(SceneSample {
        seed,
        size,
        rgb: Image::from_vec(size, size, 3, rgb),
        depth_dense: Image::from_vec(size, size, 1, dense),
        depth_sparse: Image::from_vec(size, size, 1, sparse),
        companion: Image::from_vec(size, size, 1, companion),
        seg: seg.iter().map(|&c| c as u8).collect(),
        objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::gen_scene;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = gen_scene(42, 16);
        let p = save_sample(dir.path(), &s).unwrap();
        assert_eq!(load_sample(&p).unwrap(), s);
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = save_sample(dir.path(), &gen_scene(1, 16)).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_sample(&p).is_err());
    }
}
