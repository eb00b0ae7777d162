//! Directory layouts of the real datasets.
//!
//! * Faces in the wild (`celeba`): `Img/img_celeba/<file>`,
//!   `Anno/list_bbox_celeba.txt`, `Anno/list_landmarks_celeba.txt` and
//!   `Eval/list_eval_partition.txt`, each with the usual count and header
//!   lines. Partitions 0 and 1 form the training split, 2 the test split.
//!   Faces covering less than the configured fraction of the image are
//!   dropped.
//! * Unaligned faces (`aflw`): `images/<file>` plus `aflw_train.txt` and
//!   `aflw_test.txt`, one face per line:
//!   `<file> x1 y1 ... x5 y5 bx by bw bh` (left eye, right eye, nose,
//!   mouth corners, then the face box).
//! * Birds (`cub`): the standard `images.txt`, `image_class_labels.txt`,
//!   `train_test_split.txt`, `bounding_boxes.txt`, `parts/part_locs.txt`
//!   and `images/<path>` files. Only the configured category ids are kept.
//! * Segmentation benchmark (`voc-<category>`): `JPEGImages/<id>.jpg`,
//!   `SegmentationClass/<id>.png`, `SegmentationObject/<id>.png` and
//!   `ImageSets/Segmentation/{train,val}.txt`; every instance of the category
//!   becomes one sample whose crop is its padded bounding box.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use super::{require, CropBox, Entry, MaskSource};
use crate::config::{DatasetSpec, Split, VocCategory};
use crate::error::{Error, Result};

/// Padding added around object boxes before cropping, per side.
pub const VOC_BOX_PADDING: f64 = 0.1;

fn read_lines(path: &Path) -> Result<Vec<String>> {
    require(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn parse_fields(path: &Path, line: &str, expect: usize) -> Result<Vec<f64>> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < expect + 1 {
        return Err(Error::Integrity { path: path.into(), reason: format!("malformed line {line:?}") });
    }
    fields[1..=expect]
        .iter()
        .map(|f| f.parse::<f64>().map_err(|_| Error::Integrity { path: path.into(), reason: format!("bad number {f:?}") }))
        .collect()
}

/// Rows keyed by their first field, skipping `skip` header lines.
fn keyed_table(path: &Path, skip: usize, expect: usize) -> Result<HashMap<String, Vec<f64>>> {
    read_lines(path)?
        .iter()
        .skip(skip)
        .map(|l| Ok((l.split_whitespace().next().unwrap_or_default().to_string(), parse_fields(path, l, expect)?)))
        .collect()
}

fn pairs(values: &[f64]) -> Vec<Option<[f64; 2]>> {
    values.chunks(2).map(|c| Some([c[0], c[1]])).collect()
}

pub(super) fn celeba(spec: &DatasetSpec) -> Result<(Vec<Entry>, usize)> {
    let root = &spec.root;
    let bbox_path = root.join("Anno/list_bbox_celeba.txt");
    let lm_path = root.join("Anno/list_landmarks_celeba.txt");
    let part_path = root.join("Eval/list_eval_partition.txt");
    let boxes = keyed_table(&bbox_path, 2, 4)?;
    let marks = keyed_table(&lm_path, 2, 10)?;
    let partitions = read_lines(&part_path)?;
    let mut entries = Vec::new();
    let mut filtered = 0;
    for line in &partitions {
        let mut it = line.split_whitespace();
        let (Some(file), Some(part)) = (it.next(), it.next()) else {
            return Err(Error::Integrity { path: part_path.clone(), reason: format!("malformed line {line:?}") });
        };
        let in_split = match spec.split {
            Split::Train => part != "2",
            Split::Test => part == "2",
        };
        if !in_split {
            continue;
        }
        let (Some(b), Some(l)) = (boxes.get(file), marks.get(file)) else {
            filtered += 1;
            continue;
        };
        let image = root.join("Img/img_celeba").join(file);
        let Ok((w, h)) = image::image_dimensions(&image) else {
            filtered += 1;
            continue;
        };
        let bbox = [b[0], b[1], b[2], b[3]];
        if CropBox::area_fraction(bbox, w, h) < spec.face_area_threshold {
            filtered += 1;
            continue;
        }
        entries.push(Entry {
            id: file.to_string(),
            image,
            crop: CropBox::square_around(bbox, 0.0),
            landmarks: Some(pairs(l)),
            bbox: Some(bbox),
            mask: MaskSource::None,
        });
    }
    Ok((entries, filtered))
}

pub(super) fn aflw(spec: &DatasetSpec) -> Result<(Vec<Entry>, usize)> {
    let list = spec.root.join(match spec.split {
        Split::Train => "aflw_train.txt",
        Split::Test => "aflw_test.txt",
    });
    let mut entries = Vec::new();
    for line in read_lines(&list)? {
        let v = parse_fields(&list, &line, 14)?;
        let file = line.split_whitespace().next().unwrap_or_default();
        let bbox = [v[10], v[11], v[12], v[13]];
        entries.push(Entry {
            id: file.to_string(),
            image: spec.root.join("images").join(file),
            crop: CropBox::square_around(bbox, 0.0),
            landmarks: Some(pairs(&v[..10])),
            bbox: Some(bbox),
            mask: MaskSource::None,
        });
    }
    Ok((entries, 0))
}

/// Part annotations of the bird dataset.
pub const CUB_PARTS: usize = 15;

pub(super) fn cub(spec: &DatasetSpec) -> Result<(Vec<Entry>, usize)> {
    let root = &spec.root;
    let images = read_lines(&root.join("images.txt"))?;
    let labels = keyed_table(&root.join("image_class_labels.txt"), 0, 1)?;
    let split = keyed_table(&root.join("train_test_split.txt"), 0, 1)?;
    let boxes = keyed_table(&root.join("bounding_boxes.txt"), 0, 4)?;
    let locs_path = root.join("parts/part_locs.txt");
    let mut parts: HashMap<String, Vec<Option<[f64; 2]>>> = HashMap::new();
    for line in read_lines(&locs_path)? {
        let v = parse_fields(&locs_path, &line, 4)?;
        let id = line.split_whitespace().next().unwrap_or_default().to_string();
        let slot = parts.entry(id).or_insert_with(|| vec![None; CUB_PARTS]);
        let p = v[0] as usize;
        if (1..=CUB_PARTS).contains(&p) && v[3] > 0.0 {
            slot[p - 1] = Some([v[1], v[2]]);
        }
    }
    let mut entries = Vec::new();
    let mut filtered = 0;
    for line in &images {
        let mut it = line.split_whitespace();
        let (Some(id), Some(rel)) = (it.next(), it.next()) else { continue };
        let class = labels.get(id).map(|v| v[0] as u32);
        if !class.is_some_and(|c| spec.categories.contains(&c)) {
            continue;
        }
        let is_train = split.get(id).is_some_and(|v| v[0] > 0.0);
        if is_train != (spec.split == Split::Train) {
            continue;
        }
        let Some(b) = boxes.get(id) else {
            filtered += 1;
            continue;
        };
        let bbox = [b[0], b[1], b[2], b[3]];
        entries.push(Entry {
            id: id.to_string(),
            image: root.join("images").join(rel),
            crop: CropBox::square_around(bbox, 0.0),
            landmarks: Some(parts.remove(id).unwrap_or_else(|| vec![None; CUB_PARTS])),
            bbox: Some(bbox),
            mask: MaskSource::None,
        });
    }
    Ok((entries, filtered))
}

/// Reads an 8-bit palette or grayscale PNG as raw indices, without palette
/// expansion. Returns `(width, height, indices)`.
pub fn read_index_png(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let bad = |reason: String| Error::Integrity { path: path.to_path_buf(), reason };
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(bad(format!("expected 8-bit indexed labels, found {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width, info.height);
    let mut out = Vec::with_capacity((w * h) as usize);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        out.extend_from_slice(&row[..w as usize]);
    }
    Ok((w, h, out))
}

/// Label value marking object boundaries in the benchmark annotations.
const VOID: u8 = 255;

pub(super) fn voc(spec: &DatasetSpec, category: VocCategory) -> Result<(Vec<Entry>, usize)> {
    let root = &spec.root;
    let list = root.join(match spec.split {
        Split::Train => "ImageSets/Segmentation/train.txt",
        Split::Test => "ImageSets/Segmentation/val.txt",
    });
    let mut entries = Vec::new();
    let mut filtered = 0;
    for id in read_lines(&list)? {
        let class_path = root.join("SegmentationClass").join(format!("{id}.png"));
        let object_path: PathBuf = root.join("SegmentationObject").join(format!("{id}.png"));
        let image = root.join("JPEGImages").join(format!("{id}.jpg"));
        require(&class_path)?;
        require(&object_path)?;
        let (w, h, classes) = read_index_png(&class_path)?;
        let (w2, h2, objects) = read_index_png(&object_path)?;
        if (w, h) != (w2, h2) {
            return Err(Error::Integrity { path: object_path, reason: "label images differ in size".into() });
        }
        // per instance: class votes and pixel bounds
        let mut stats: HashMap<u8, (HashMap<u8, usize>, [usize; 4])> = HashMap::new();
        for (i, (&obj, &cls)) in objects.iter().zip(&classes).enumerate() {
            if obj == 0 || obj == VOID || cls == VOID {
                continue;
            }
            let (x, y) = (i % w as usize, i / w as usize);
            let s = stats.entry(obj).or_insert_with(|| (HashMap::new(), [x, y, x, y]));
            *s.0.entry(cls).or_default() += 1;
            let b = &mut s.1;
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x);
            b[3] = b[3].max(y);
        }
        let mut instances: Vec<_> = stats.into_iter().collect();
        instances.sort_by_key(|(k, _)| *k);
        for (index, (votes, b)) in instances {
            let class = votes.into_iter().max_by_key(|(c, n)| (*n, std::cmp::Reverse(*c))).map(|(c, _)| c);
            if class != Some(category.class_index()) {
                continue;
            }
            let bbox = [b[0] as f64, b[1] as f64, (b[2] - b[0] + 1) as f64, (b[3] - b[1] + 1) as f64];
            if bbox[2] < 2.0 || bbox[3] < 2.0 {
                filtered += 1;
                continue;
            }
            entries.push(Entry {
                id: format!("{id}_{index}"),
                image: image.clone(),
                crop: CropBox::square_around(bbox, VOC_BOX_PADDING),
                landmarks: None,
                bbox: Some(bbox),
                mask: MaskSource::Instance(object_path.clone(), index),
            });
        }
    }
    Ok((entries, filtered))
}
