use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader};

use super::{BBox, Frame, Sequence};
use crate::error::{Error, Result};

pub const ANNOTATION_HEADER: &str = "frame_index,x1,y1,x2,y2";

fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("frames").join(format!("{index:06}.png"))
}

fn read_frame(path: &Path) -> Result<Frame> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let px = img.to_luma16().into_raw();
            Frame::new(w, h, px.iter().map(|&v| f32::from(v) / 65535.0).collect())
        }
        _ => Frame::from_u8(w, h, img.to_luma8().as_raw()),
    }
}

fn parse_annotations(path: &Path, n_frames: usize, width: usize, height: usize) -> Result<Vec<Vec<BBox>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut boxes = vec![Vec::new(); n_frames];
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() || (i == 0 && row == ANNOTATION_HEADER) {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(line, format!("expected 5 fields, found {}", fields.len())));
        }
        let frame: usize = fields[0]
            .parse()
            .map_err(|_| err(line, format!("bad frame index {:?}", fields[0])))?;
        if frame >= n_frames {
            return Err(err(line, format!("frame {frame} does not exist (sequence has {n_frames})")));
        }
        let mut c = [0.0f64; 4];
        for (v, f) in c.iter_mut().zip(&fields[1..]) {
            *v = f.parse().map_err(|_| err(line, format!("bad coordinate {f:?}")))?;
        }
        let b = BBox::new(c[0], c[1], c[2], c[3]);
        let in_bounds = b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= width as f64 && b.y2 <= height as f64;
        if !b.is_valid() || !in_bounds {
            return Err(err(line, format!("box {c:?} is empty or outside the {width}x{height} image")));
        }
        boxes[frame].push(b);
    }
    Ok(boxes)
}

/// Load one sequence directory; the id is the directory name.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidConfig(format!("unusable sequence directory {}", dir.display())))?
        .to_string();
    let frames_dir = dir.join("frames");
    let entries = fs::read_dir(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut count = 0usize;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&frames_dir, e))?;
        if entry.path().extension().is_some_and(|e| e == "png") {
            count += 1;
        }
    }
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let p = frame_path(dir, i);
        if !p.is_file() {
            return Err(Error::MissingFrame { path: p });
        }
        frames.push(read_frame(&p)?);
    }
    let (w, h) = frames.first().map_or((0, 0), |f| (f.width, f.height));
    let annotations = parse_annotations(&dir.join("annotations.csv"), count, w, h)?;
    Sequence::new(id, frames, annotations)
}

/// Every sequence directory directly under `root`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<Sequence>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.join("frames").is_dir() {
            dirs.push(p);
        }
    }
    dirs.sort();
    dirs.iter().map(|d| load_sequence(d)).collect()
}

pub fn write_sequence(seq: &Sequence, root: &Path) -> Result<()> {
    let dir = root.join(&seq.id);
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for (i, f) in seq.frames.iter().enumerate() {
        let p = frame_path(&dir, i);
        image::save_buffer_with_format(&p, &f.to_u8(), f.width as u32, f.height as u32, image::ExtendedColorType::L8, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: p.clone(), source })?;
    }
    let mut csv = String::from(ANNOTATION_HEADER);
    csv.push('\n');
    for (i, boxes) in seq.annotations.iter().enumerate() {
        for b in boxes {
            csv.push_str(&format!("{i},{},{},{},{}\n", b.x1, b.y1, b.x2, b.y2));
        }
    }
    let p = dir.join("annotations.csv");
    fs::File::create(&p)
        .and_then(|mut f| f.write_all(csv.as_bytes()))
        .map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(id: &str, boxes: Vec<Vec<BBox>>) -> Sequence {
        let frames = (0..boxes.len())
            .map(|i| Frame::from_u8(8, 8, &[(i * 40) as u8; 64]).unwrap())
            .collect();
        Sequence::new(id, frames, boxes).unwrap()
    }

    #[test]
    fn round_trip_preserves_pixels_and_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let s = tiny("b", vec![vec![BBox::new(0.5, 1.0, 3.25, 4.0)], vec![], vec![BBox::new(1.0, 1.0, 8.0, 8.0)]]);
        write_sequence(&s, dir.path()).unwrap();
        write_sequence(&tiny("a", vec![vec![]]), dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(loaded[1].annotations, s.annotations);
        assert_eq!(loaded[1].frames, s.frames);
    }

    #[test]
    fn empty_annotation_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_sequence(&tiny("s", vec![vec![], vec![]]), dir.path()).unwrap();
        fs::write(dir.path().join("s/annotations.csv"), "").unwrap();
        let s = load_sequence(&dir.path().join("s")).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.annotations.iter().all(Vec::is_empty));
    }

    #[test]
    fn bad_rows_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        write_sequence(&tiny("s", vec![vec![]]), dir.path()).unwrap();
        let csv = dir.path().join("s/annotations.csv");
        for (body, needle) in [
            ("0,1,1,2,2\n5,1,1,2,2\n", "frame 5 does not exist"),
            ("0,1,1,2\n", "expected 5 fields"),
            ("0,1,1,20,2\n", "outside"),
            ("0,a,1,2,2\n", "bad coordinate"),
        ] {
            fs::write(&csv, format!("{ANNOTATION_HEADER}\n{body}")).unwrap();
            match load_sequence(&dir.path().join("s")) {
                Err(Error::Parse { path, line, msg }) => {
                    assert_eq!(path, csv);
                    assert!(line >= 2, "{line}");
                    assert!(msg.contains(needle), "{msg}");
                }
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn gap_in_frame_numbering_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_sequence(&tiny("s", vec![vec![], vec![], vec![]]), dir.path()).unwrap();
        fs::rename(dir.path().join("s/frames/000001.png"), dir.path().join("s/frames/000007.png")).unwrap();
        assert!(matches!(load_sequence(&dir.path().join("s")), Err(Error::MissingFrame { .. })));
    }
}
