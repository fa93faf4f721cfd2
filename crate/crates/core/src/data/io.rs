use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DatasetSpec, PointCloudBlock};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const BINARY_MAGIC: &[u8; 4] = b"DTAB";

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

/// Writes the text block format: header `N C K`, then one line per point with
/// C reals and the integer label. Reals use shortest round-trip formatting.
pub fn write_block(path: &Path, block: &PointCloudBlock, num_classes: usize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# block {}", block.id)?;
    writeln!(w, "{} {} {}", block.len(), block.channels(), num_classes)?;
    for (r, label) in block.labels.iter().enumerate() {
        for v in block.points.row(r) {
            write!(w, "{v} ")?;
        }
        writeln!(w, "{label}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one text block; the id is the file stem.
pub fn read_block(path: &Path) -> Result<(PointCloudBlock, usize)> {
    let file = fs::File::open(path)?;
    let mut header: Option<(usize, usize, usize)> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        match header {
            None => {
                if fields.len() != 3 {
                    return Err(parse_err(path, lineno, "header must be `N C K`"));
                }
                let nums: std::result::Result<Vec<usize>, _> =
                    fields.iter().map(|f| f.parse::<usize>()).collect();
                let nums = nums.map_err(|e| parse_err(path, lineno, e.to_string()))?;
                if nums[1] < 3 {
                    return Err(parse_err(path, lineno, "need at least 3 channels"));
                }
                header = Some((nums[0], nums[1], nums[2]));
            }
            Some((n, c, k)) => {
                if labels.len() == n {
                    return Err(parse_err(path, lineno, format!("more than {n} points")));
                }
                if fields.len() != c + 1 {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("expected {} columns, found {}", c + 1, fields.len()),
                    ));
                }
                for f in &fields[..c] {
                    let v: f64 = f
                        .parse()
                        .map_err(|_| parse_err(path, lineno, format!("bad real `{f}`")))?;
                    if !v.is_finite() {
                        return Err(parse_err(path, lineno, "non-finite value"));
                    }
                    data.push(v);
                }
                let label: i64 = fields[c]
                    .parse()
                    .map_err(|_| parse_err(path, lineno, format!("bad label `{}`", fields[c])))?;
                if label < 0 || label as usize >= k {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("label {label} out of range for {k} classes"),
                    ));
                }
                labels.push(label as usize);
            }
        }
    }
    let (n, c, k) = header.ok_or_else(|| parse_err(path, 0, "missing header"))?;
    if labels.len() != n {
        return Err(parse_err(
            path,
            0,
            format!("header promises {n} points, found {}", labels.len()),
        ));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((PointCloudBlock::new(id, Matrix::from_vec(n, c, data)?, labels)?, k))
}

/// All `*.blk` files in `dir`, in lexicographic file-name order, validated against `spec`.
pub fn load_blocks(dir: &Path, spec: &DatasetSpec) -> Result<Vec<PointCloudBlock>> {
    spec.validate()?;
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "blk"))
        .collect();
    paths.sort();
    let mut blocks = Vec::with_capacity(paths.len());
    for p in paths {
        let (block, k) = read_block(&p)?;
        if block.channels() != spec.num_channels() {
            return Err(parse_err(
                &p,
                0,
                format!(
                    "{} channels, dataset expects {}",
                    block.channels(),
                    spec.num_channels()
                ),
            ));
        }
        if k > spec.num_classes() {
            return Err(parse_err(
                &p,
                0,
                format!("{k} classes, dataset has {}", spec.num_classes()),
            ));
        }
        if let Err(Error::LabelRange { label, classes }) = block.check_labels(spec.num_classes()) {
            return Err(parse_err(
                &p,
                0,
                format!("label {label} out of range for {classes} classes"),
            ));
        }
        if let Some(ppb) = spec.points_per_block {
            if block.len() != ppb {
                return Err(parse_err(
                    &p,
                    0,
                    format!("{} points, dataset expects {ppb}", block.len()),
                ));
            }
        }
        blocks.push(block);
    }
    Ok(blocks)
}

/// Binary cache: magic `DTAB`, little-endian u32 N, C, K, N·C f32 values, N i32 labels.
pub fn write_binary(path: &Path, block: &PointCloudBlock, num_classes: usize) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(BINARY_MAGIC)?;
    for v in [block.len(), block.channels(), num_classes] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for v in block.points.as_slice() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    for &l in &block.labels {
        w.write_all(&(l as i32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<(PointCloudBlock, usize)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |d: &str| parse_err(path, 0, d.to_string());
    if bytes.len() < 16 || &bytes[..4] != BINARY_MAGIC {
        return Err(bad("missing DTAB magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap_or([0; 4]));
    let (n, c, k) = (word(4) as usize, word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + 4 * n * c + 4 * n {
        return Err(bad("truncated binary block"));
    }
    let mut data = Vec::with_capacity(n * c);
    for i in 0..n * c {
        let o = 16 + 4 * i;
        data.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap_or([0; 4])) as f64);
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let o = 16 + 4 * n * c + 4 * i;
        let l = i32::from_le_bytes(bytes[o..o + 4].try_into().unwrap_or([0; 4]));
        if l < 0 || l as usize >= k {
            return Err(bad("label out of range"));
        }
        labels.push(l as usize);
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((PointCloudBlock::new(id, Matrix::from_vec(n, c, data)?, labels)?, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> PointCloudBlock {
        PointCloudBlock::new(
            "b0",
            Matrix::from_rows(&[
                [0.1, 0.2, 0.3, 0.9, 0.5, 0.25],
                [1.0 / 3.0, -2.5, 1e-7, 0.0, 1.0, 123.456],
            ]),
            vec![0, 5],
        )
        .unwrap()
    }

    #[test]
    fn empty_directory_loads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_blocks(dir.path(), &DatasetSpec::ms_lidar()).unwrap().is_empty());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train/b0.blk");
        write_block(&p, &fixture(), 6).unwrap();
        let mut spec = DatasetSpec::ms_lidar();
        spec.points_per_block = None;
        let blocks = load_blocks(&dir.path().join("train"), &spec).unwrap();
        assert_eq!(blocks, vec![fixture()]);
    }

    #[test]
    fn out_of_range_label_is_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.blk");
        fs::write(&p, "# comment\n1 6 6\n0 0 0 0.1 0.2 0.3 99\n").unwrap();
        let err = read_block(&p).unwrap_err().to_string();
        assert!(err.contains("bad.blk:3"), "{err}");
        // a 100-class file is still rejected against a 6-class dataset
        fs::write(&p, "1 6 100\n0 0 0 0.1 0.2 0.3 99\n").unwrap();
        let mut spec = DatasetSpec::ms_lidar();
        spec.points_per_block = None;
        assert!(load_blocks(dir.path(), &spec).is_err());
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.blk");
        fs::write(&p, "2 3 2\n0 0 0 1\n0 0 1\n").unwrap();
        assert!(read_block(&p).unwrap_err().to_string().contains("x.blk:3"));
        fs::write(&p, "2 3 2\n0 0 0 1\n").unwrap();
        assert!(read_block(&p).is_err());
        fs::write(&p, "1 3 2\n0 zero 0 1\n").unwrap();
        assert!(read_block(&p).is_err());
    }

    #[test]
    fn files_load_in_lexicographic_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = fixture();
        for name in ["c", "a", "b"] {
            b.id = name.into();
            write_block(&dir.path().join(format!("{name}.blk")), &b, 6).unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let mut spec = DatasetSpec::ms_lidar();
        spec.points_per_block = Some(2);
        let ids: Vec<_> = load_blocks(dir.path(), &spec)
            .unwrap()
            .into_iter()
            .map(|b| b.id)
            .collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn binary_cache_mirrors_text() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b0.bin");
        write_binary(&p, &fixture(), 6).unwrap();
        let (back, k) = read_binary(&p).unwrap();
        assert_eq!(k, 6);
        assert_eq!(back.labels, fixture().labels);
        for (a, b) in back.points.as_slice().iter().zip(fixture().points.as_slice()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"DTAB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 16 + 4 * 12 + 4 * 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn text_format_round_trips_bit_exactly(
            vals in proptest::collection::vec(-1e6f64..1e6, 3..40),
            label in 0usize..6,
        ) {
            let n = vals.len() / 3;
            let pts = Matrix::from_vec(n, 3, vals[..n * 3].to_vec()).unwrap();
            let block = PointCloudBlock::new("p", pts, vec![label; n]).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("p.blk");
            write_block(&p, &block, 6).unwrap();
            let (back, k) = read_block(&p).unwrap();
            prop_assert_eq!(k, 6);
            prop_assert_eq!(back, block);
        }
    }
}
