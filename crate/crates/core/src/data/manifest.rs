//! CSV manifests over image folders: `filename,age,attr_0..attr_{N-1},identity`.

use std::path::{Path, PathBuf};

use super::{AgeGroup, Dataset, FaceSample};
use crate::error::{Error, Result};
use crate::generator::AttributeVector;
use crate::image::{load_image, save_png};

/// Caps the number of image-decoding threads.
pub const NUM_WORKERS_ENV: &str = "A3GAN_NUM_WORKERS";

fn num_workers() -> usize {
    std::env::var(NUM_WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

struct Row {
    line: usize,
    path: PathBuf,
    age_group: AgeGroup,
    attributes: AttributeVector,
    identity: u64,
}

fn parse_rows(dir: &Path, manifest: &Path) -> Result<(Vec<Row>, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(manifest, io),
            other => Error::Data(format!("{}: {other:?}", manifest.display())),
        })?;
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let n_attr = cols.iter().filter(|c| c.starts_with("attr_")).count();
    let expected: Vec<String> = ["filename".to_string(), "age".to_string()]
        .into_iter()
        .chain((0..n_attr).map(|i| format!("attr_{i}")))
        .chain(["identity".to_string()])
        .collect();
    if cols != expected {
        return Err(Error::Validation(format!(
            "{}: header must be {}, got {}",
            manifest.display(),
            expected.join(","),
            cols.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |m: String| Error::Validation(format!("{} line {line}: {m}", manifest.display()));
        if rec.len() != n_attr + 3 {
            return Err(bad(format!(
                "expected {} attribute columns, found {}",
                n_attr,
                rec.len().saturating_sub(3)
            )));
        }
        let age: i64 = rec[1].parse().map_err(|_| bad(format!("age `{}` is not an integer", &rec[1])))?;
        let age_group = AgeGroup::from_age(age).map_err(|_| bad(format!("negative age {age}")))?;
        let values = (0..n_attr)
            .map(|k| {
                rec[2 + k]
                    .parse::<f64>()
                    .map_err(|_| bad(format!("attribute `{}` is not a number", &rec[2 + k])))
            })
            .collect::<Result<Vec<_>>>()?;
        let attributes = AttributeVector::new(values).map_err(|e| bad(e.to_string()))?;
        let identity = rec[n_attr + 2]
            .parse()
            .map_err(|_| bad(format!("identity `{}` is not an integer", &rec[n_attr + 2])))?;
        rows.push(Row {
            line,
            path: dir.join(&rec[0]),
            age_group,
            attributes,
            identity,
        });
    }
    Ok((rows, n_attr))
}

fn load_row(row: &Row, size: usize) -> Result<FaceSample> {
    if !row.path.is_file() {
        return Err(Error::io(
            &row.path,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("image listed on manifest line {} not found", row.line),
            ),
        ));
    }
    Ok(FaceSample {
        image: load_image(&row.path, size)?,
        age_group: row.age_group,
        attributes: row.attributes.clone(),
        identity: row.identity,
    })
}

/// Loads every row, decoding images on up to `A3GAN_NUM_WORKERS` threads;
/// the result keeps manifest order.
pub fn load_manifest(dir: &Path, manifest: &Path, image_size: usize) -> Result<Dataset> {
    let (rows, n_attr) = parse_rows(dir, manifest)?;
    let workers = num_workers().min(rows.len().max(1));
    let chunk = rows.len().div_ceil(workers).max(1);
    let samples: Vec<FaceSample> = std::thread::scope(|scope| {
        let handles: Vec<_> = rows
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|r| load_row(r, image_size)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut all = Vec::with_capacity(rows.len());
        for h in handles {
            all.extend(h.join().expect("image loader thread panicked")?);
        }
        Ok::<_, Error>(all)
    })?;
    Dataset::new(samples, n_attr, image_size)
}

/// Writes one PNG per sample plus `manifest.csv`, readable by [`load_manifest`].
pub fn export_dataset(data: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    let mut header = vec!["filename".to_string(), "age".to_string()];
    header.extend((0..data.attr_dim).map(|i| format!("attr_{i}")));
    header.push("identity".into());
    w.write_record(&header)?;
    for (i, s) in data.samples.iter().enumerate() {
        let name = format!("{i:05}_id{}_{}.png", s.identity, s.age_group.label());
        save_png(&s.image, &dir.join(&name))?;
        let mut rec = vec![name, s.age_group.representative_age().to_string()];
        rec.extend(s.attributes.values().iter().map(|v| format!("{v}")));
        rec.push(s.identity.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
